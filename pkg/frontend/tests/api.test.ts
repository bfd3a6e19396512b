import { describe, expect, it } from "vitest";

import { ApiError, ReviewApi } from "../src/api.js";
import type { FetchLike } from "../src/api.js";

interface Captured {
  url: string;
  init?: RequestInit;
}

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

function capturingFetch(response: () => Response): { fetchFn: FetchLike; calls: Captured[] } {
  const calls: Captured[] = [];
  const fetchFn: FetchLike = async (url, init) => {
    calls.push({ url, init });
    return response();
  };
  return { fetchFn, calls };
}

describe("ReviewApi", () => {
  it("lists clusters with offset and limit in the query", async () => {
    const listing = { clusters: [], total: 0, offset: 20, limit: 50 };
    const { fetchFn, calls } = capturingFetch(() => jsonResponse(listing));
    const api = new ReviewApi("http://reviewer:8000", fetchFn);
    const result = await api.listClusters(20, 50);
    expect(calls[0].url).toBe("http://reviewer:8000/api/clusters?offset=20&limit=50");
    expect(result).toEqual(listing);
  });

  it("requests geometry with decimate only when asked", async () => {
    const geometry = { cluster_id: 4, fiber_count: 0, fibers: [] };
    const { fetchFn, calls } = capturingFetch(() => jsonResponse(geometry));
    const api = new ReviewApi("", fetchFn);
    await api.geometry(4);
    await api.geometry(4, 3);
    expect(calls[0].url).toBe("/api/clusters/4/geometry");
    expect(calls[1].url).toBe("/api/clusters/4/geometry?decimate=3");
  });

  it("submits labels as a JSON POST with label and rater", async () => {
    const summary = {
      cluster_id: 9,
      member_count: 12,
      mean_length_mm: 55.5,
      centroid_mm: [1, 2, 3],
      label: "CN_V_L",
      screened_nerve: "CN_V",
      status: "reviewed",
    };
    const { fetchFn, calls } = capturingFetch(() => jsonResponse(summary));
    const api = new ReviewApi("", fetchFn);
    const result = await api.submitLabel(9, "CN_V_L", "reviewer-1");
    expect(calls[0].url).toBe("/api/clusters/9/label");
    expect(calls[0].init?.method).toBe("POST");
    expect(calls[0].init?.headers).toEqual({ "content-type": "application/json" });
    expect(JSON.parse(String(calls[0].init?.body))).toEqual({
      label: "CN_V_L",
      rater: "reviewer-1",
    });
    expect(result.label).toBe("CN_V_L");
  });

  it("fetches progress", async () => {
    const progress = { labeled: 3, total: 10, rejected: 1, per_nerve: { CN_V: 2 } };
    const { fetchFn, calls } = capturingFetch(() => jsonResponse(progress));
    const api = new ReviewApi("", fetchFn);
    expect(await api.progress()).toEqual(progress);
    expect(calls[0].url).toBe("/api/progress");
  });

  it("surfaces a service verdict as ApiError with status and detail", async () => {
    const { fetchFn } = capturingFetch(() => jsonResponse({ detail: "unknown label" }, 422));
    const api = new ReviewApi("", fetchFn);
    const error = await api.submitLabel(1, "CN_X", "r").catch((e: unknown) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect((error as ApiError).status).toBe(422);
    expect((error as ApiError).detail).toBe("unknown label");
  });

  it("falls back to status text when the error body is not JSON", async () => {
    const { fetchFn } = capturingFetch(
      () => new Response("<html>busy</html>", { status: 503, statusText: "Service Unavailable" }),
    );
    const api = new ReviewApi("", fetchFn);
    const error = await api.progress().catch((e: unknown) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect((error as ApiError).status).toBe(503);
    expect((error as ApiError).detail).toBe("Service Unavailable");
  });
});
