/** One reviewer's pass over the cluster queue.
 *
 * Labeling advances optimistically, but a cluster is only ever *shown* as
 * saved after the service acknowledges the submission; a definite rejection
 * rolls the cursor back to the failed cluster.
 */

import type { Submission, SubmissionQueue } from "./queue.js";
import type { ClusterGeometry, ClusterSummary } from "./types.js";

export type SaveState = "unsaved" | "pending" | "saved" | "failed";

export interface ClusterState {
  summary: ClusterSummary;
  save: SaveState;
  optimisticLabel: string | null;
  lastError: string | null;
}

export class ReviewSession {
  private readonly states: ClusterState[];
  private readonly indexById = new Map<number, number>();
  private readonly geometry = new Map<number, ClusterGeometry>();
  private cursorIndex = 0;

  constructor(
    clusters: ClusterSummary[],
    private readonly queue: SubmissionQueue,
  ) {
    this.states = clusters.map((summary) => ({
      summary,
      save: "unsaved" as SaveState,
      optimisticLabel: null,
      lastError: null,
    }));
    this.states.forEach((s, i) => this.indexById.set(s.summary.cluster_id, i));
  }

  get length(): number {
    return this.states.length;
  }

  get cursor(): number {
    return this.cursorIndex;
  }

  get current(): ClusterState | null {
    return this.states[this.cursorIndex] ?? null;
  }

  state(clusterId: number): ClusterState | null {
    const index = this.indexById.get(clusterId);
    return index === undefined ? null : this.states[index];
  }

  advance(): void {
    if (this.cursorIndex < this.states.length - 1) this.cursorIndex++;
  }

  back(): void {
    if (this.cursorIndex > 0) this.cursorIndex--;
  }

  /** Step back one cluster so the reviewer can relabel it. */
  undo(): void {
    this.back();
  }

  /** Queue the label for the current cluster and advance optimistically. */
  label(labelName: string): void {
    const state = this.current;
    if (state === null) return;
    state.optimisticLabel = labelName;
    state.save = "pending";
    state.lastError = null;
    this.queue.push({ clusterId: state.summary.cluster_id, label: labelName });
    this.advance();
  }

  /** Service acknowledged: only now may the cluster show as saved. */
  handleSaved(submission: Submission, summary: ClusterSummary): void {
    const state = this.state(submission.clusterId);
    if (state === null) return;
    state.summary = summary;
    state.save = "saved";
    state.optimisticLabel = null;
  }

  /** Definite rejection: mark failed and return the reviewer to the cluster. */
  handleRejected(submission: Submission, _status: number, detail: string): void {
    const index = this.indexById.get(submission.clusterId);
    if (index === undefined) return;
    const state = this.states[index];
    state.save = "failed";
    state.optimisticLabel = null;
    state.lastError = detail;
    this.cursorIndex = index;
  }

  /** Clusters acknowledged as saved during this session. */
  savedCount(): number {
    return this.states.filter((s) => s.save === "saved").length;
  }

  cacheGeometry(geometry: ClusterGeometry): void {
    this.geometry.set(geometry.cluster_id, geometry);
  }

  cachedGeometry(clusterId: number): ClusterGeometry | undefined {
    return this.geometry.get(clusterId);
  }
}
