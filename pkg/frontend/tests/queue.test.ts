import { describe, expect, it } from "vitest";

import { ApiError } from "../src/api.js";
import { SubmissionQueue } from "../src/queue.js";
import type { QueueEvents, Submission } from "../src/queue.js";
import type { ClusterSummary } from "../src/types.js";

function summaryFor(sub: Submission): ClusterSummary {
  return {
    cluster_id: sub.clusterId,
    member_count: 10,
    mean_length_mm: 42.0,
    centroid_mm: [0, 0, 0],
    label: sub.label,
    screened_nerve: null,
    status: "reviewed",
  };
}

interface EventLog {
  saved: Submission[];
  rejected: Array<{ submission: Submission; status: number; detail: string }>;
  offline: number[];
  online: number;
}

function recordingEvents(): { events: QueueEvents; log: EventLog } {
  const log: EventLog = { saved: [], rejected: [], offline: [], online: 0 };
  const events: QueueEvents = {
    onSaved: (submission) => log.saved.push(submission),
    onRejected: (submission, status, detail) =>
      log.rejected.push({ submission, status, detail }),
    onOffline: (pending) => log.offline.push(pending),
    onOnline: () => {
      log.online += 1;
    },
  };
  return { events, log };
}

async function settle(ticks = 6): Promise<void> {
  for (let i = 0; i < ticks; i += 1) {
    await new Promise((resolve) => setTimeout(resolve, 0));
  }
}

describe("SubmissionQueue", () => {
  it("acknowledged submission fires onSaved once and drains", async () => {
    const { events, log } = recordingEvents();
    const queue = new SubmissionQueue(async (sub) => summaryFor(sub), events);
    queue.push({ clusterId: 3, label: "CN_V_L" });
    await settle();
    expect(log.saved.map((s) => s.clusterId)).toEqual([3]);
    expect(log.rejected).toEqual([]);
    expect(queue.pending).toBe(0);
    expect(queue.isOffline).toBe(false);
  });

  it("definite 4xx removes the submission without retrying", async () => {
    const { events, log } = recordingEvents();
    let attempts = 0;
    const queue = new SubmissionQueue(async (sub) => {
      attempts += 1;
      if (sub.clusterId === 1) throw new ApiError(422, "unknown label");
      return summaryFor(sub);
    }, events);
    queue.push({ clusterId: 1, label: "CN_IX" });
    queue.push({ clusterId: 2, label: "CN_V_L" });
    await settle();
    expect(log.rejected).toHaveLength(1);
    expect(log.rejected[0].status).toBe(422);
    expect(log.rejected[0].detail).toBe("unknown label");
    // rejected head is discarded and the next submission still goes through
    expect(log.saved.map((s) => s.clusterId)).toEqual([2]);
    expect(attempts).toBe(2);
    expect(queue.pending).toBe(0);
  });

  it("network burst of three is delivered in order after reconnect", async () => {
    const { events, log } = recordingEvents();
    let online = false;
    const delivered: number[] = [];
    const retries: Array<() => void> = [];
    const queue = new SubmissionQueue(
      async (sub) => {
        if (!online) throw new TypeError("fetch failed");
        delivered.push(sub.clusterId);
        return summaryFor(sub);
      },
      events,
      1,
      (callback) => {
        retries.push(callback);
      },
    );

    queue.push({ clusterId: 10, label: "CN_II_D" });
    queue.push({ clusterId: 11, label: "CN_II_N" });
    queue.push({ clusterId: 12, label: "REJECTED" });
    await settle();

    // all three held, nothing lost, badge reports the full backlog
    expect(queue.pending).toBe(3);
    expect(queue.isOffline).toBe(true);
    expect(log.offline).toEqual([3]);
    expect(log.saved).toEqual([]);

    online = true;
    retries.forEach((retry) => retry());
    await settle();

    expect(delivered).toEqual([10, 11, 12]);
    expect(log.saved.map((s) => s.clusterId)).toEqual([10, 11, 12]);
    expect(log.online).toBe(1);
    expect(queue.pending).toBe(0);
    expect(queue.isOffline).toBe(false);
  });

  it("5xx is transient: the submission stays queued and succeeds on retry", async () => {
    const { events, log } = recordingEvents();
    let calls = 0;
    const retries: Array<() => void> = [];
    const queue = new SubmissionQueue(
      async (sub) => {
        calls += 1;
        if (calls === 1) throw new ApiError(503, "service warming up");
        return summaryFor(sub);
      },
      events,
      1,
      (callback) => {
        retries.push(callback);
      },
    );
    queue.push({ clusterId: 7, label: "CN_III_L" });
    await settle();
    expect(queue.pending).toBe(1);
    expect(log.rejected).toEqual([]);
    retries.forEach((retry) => retry());
    await settle();
    expect(log.saved.map((s) => s.clusterId)).toEqual([7]);
    expect(queue.pending).toBe(0);
  });

  it("never has more than one submission in flight", async () => {
    const { events } = recordingEvents();
    let inFlight = 0;
    let maxInFlight = 0;
    const queue = new SubmissionQueue(async (sub) => {
      inFlight += 1;
      maxInFlight = Math.max(maxInFlight, inFlight);
      await new Promise((resolve) => setTimeout(resolve, 1));
      inFlight -= 1;
      return summaryFor(sub);
    }, events);
    for (let i = 0; i < 8; i += 1) {
      queue.push({ clusterId: i, label: "CN_V_R" });
    }
    queue.flush();
    queue.flush();
    await settle(30);
    expect(maxInFlight).toBe(1);
    expect(queue.pending).toBe(0);
  });

  it("flush retries immediately without waiting for the scheduler", async () => {
    const { events, log } = recordingEvents();
    let online = false;
    const queue = new SubmissionQueue(
      async (sub) => {
        if (!online) throw new TypeError("fetch failed");
        return summaryFor(sub);
      },
      events,
      1,
      () => {
        // swallow scheduled retries so only flush can recover
      },
    );
    queue.push({ clusterId: 20, label: "CN_VII_VIII_L" });
    await settle();
    expect(queue.isOffline).toBe(true);
    online = true;
    queue.flush();
    await settle();
    expect(log.saved.map((s) => s.clusterId)).toEqual([20]);
  });
});
