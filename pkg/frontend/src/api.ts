/** Thin typed client for the review service; the only door to the backend. */

import type { ClusterGeometry, ClusterListing, ClusterSummary, Progress } from "./types.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** A definite verdict from the service (4xx/5xx), as opposed to no answer at all. */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

async function errorDetail(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: unknown };
    if (typeof body.detail === "string") return body.detail;
    return JSON.stringify(body);
  } catch {
    return response.statusText || "request failed";
  }
}

export class ReviewApi {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, init);
    if (!response.ok) {
      throw new ApiError(response.status, await errorDetail(response));
    }
    return (await response.json()) as T;
  }

  listClusters(offset = 0, limit = 1000): Promise<ClusterListing> {
    return this.request(`/api/clusters?offset=${offset}&limit=${limit}`);
  }

  geometry(clusterId: number, decimate?: number): Promise<ClusterGeometry> {
    const query = decimate === undefined ? "" : `?decimate=${decimate}`;
    return this.request(`/api/clusters/${clusterId}/geometry${query}`);
  }

  submitLabel(clusterId: number, label: string, rater: string): Promise<ClusterSummary> {
    return this.request(`/api/clusters/${clusterId}/label`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ label, rater }),
    });
  }

  progress(): Promise<Progress> {
    return this.request("/api/progress");
  }
}
