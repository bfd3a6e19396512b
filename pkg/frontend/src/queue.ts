/** Ordered label submissions with at-most-one in flight and offline retry.
 *
 * A network failure (no HTTP verdict) keeps the submission at the head of
 * the queue and retries, preserving order.  A definite 4xx verdict removes
 * it and reports a rejection; 5xx verdicts are treated as transient like
 * network failures.
 */

import { ApiError } from "./api.js";
import type { ClusterSummary } from "./types.js";

export interface Submission {
  clusterId: number;
  label: string;
}

export interface QueueEvents {
  onSaved(submission: Submission, summary: ClusterSummary): void;
  onRejected(submission: Submission, status: number, detail: string): void;
  onOffline(pending: number): void;
  onOnline(): void;
}

export type Sender = (submission: Submission) => Promise<ClusterSummary>;
export type Scheduler = (callback: () => void, delayMs: number) => void;

export class SubmissionQueue {
  private readonly queue: Submission[] = [];
  private inFlight = false;
  private offline = false;

  constructor(
    private readonly send: Sender,
    private readonly events: QueueEvents,
    private readonly retryDelayMs = 2000,
    private readonly schedule: Scheduler = (cb, ms) => {
      setTimeout(cb, ms);
    },
  ) {}

  get pending(): number {
    return this.queue.length;
  }

  get isOffline(): boolean {
    return this.offline;
  }

  push(submission: Submission): void {
    this.queue.push(submission);
    void this.pump();
  }

  /** Manual retry, e.g. wired to the browser's online event. */
  flush(): void {
    void this.pump();
  }

  private async pump(): Promise<void> {
    if (this.inFlight || this.queue.length === 0) return;
    this.inFlight = true;
    const head = this.queue[0];
    try {
      const summary = await this.send(head);
      this.queue.shift();
      this.inFlight = false;
      if (this.offline) {
        this.offline = false;
        this.events.onOnline();
      }
      this.events.onSaved(head, summary);
      void this.pump();
    } catch (error) {
      this.inFlight = false;
      if (error instanceof ApiError && error.status < 500) {
        this.queue.shift();
        this.events.onRejected(head, error.status, error.detail);
        void this.pump();
      } else {
        this.offline = true;
        this.events.onOffline(this.queue.length);
        this.schedule(() => {
          void this.pump();
        }, this.retryDelayMs);
      }
    }
  }
}
