/** Payload shapes of the cluster review HTTP API, plus the label vocabulary. */

export type Point3 = [number, number, number];

export interface ClusterSummary {
  cluster_id: number;
  member_count: number;
  mean_length_mm: number;
  centroid_mm: Point3;
  label: string;
  screened_nerve: string | null;
  status: "pending" | "reviewed";
}

export interface ClusterListing {
  clusters: ClusterSummary[];
  total: number;
  offset: number;
  limit: number;
}

export interface ClusterGeometry {
  cluster_id: number;
  fiber_count: number;
  fibers: Point3[][];
}

export interface Progress {
  labeled: number;
  total: number;
  rejected: number;
  per_nerve: Record<string, number>;
}

/** Nerve labels in digit-key order: key "1" submits NERVE_LABELS[0], and so on. */
export const NERVE_LABELS = [
  "CN_II_D",
  "CN_II_N",
  "CN_III_L",
  "CN_III_R",
  "CN_V_L",
  "CN_V_R",
  "CN_VII_VIII_L",
  "CN_VII_VIII_R",
] as const;

export const REJECT_LABEL = "REJECTED";
export const UNLABELED = "UNLABELED";
