/** Browser wiring: fetch the queue, render, and translate input to actions. */

import { ApiError, ReviewApi } from "./api.js";
import { OrbitCamera } from "./camera.js";
import { actionForKey } from "./keyboard.js";
import { SubmissionQueue } from "./queue.js";
import { frameToFibers, renderCluster, renderPlaceholder } from "./renderer.js";
import { ReviewSession } from "./session.js";
import type { ClusterGeometry } from "./types.js";
import { NERVE_LABELS, UNLABELED } from "./types.js";

const MAX_RENDER_FIBERS = 400; // service samples larger clusters down to this count

interface Ui {
  canvas: HTMLCanvasElement;
  surface: CanvasRenderingContext2D;
  clusterLine: HTMLElement;
  statusLine: HTMLElement;
  progressLine: HTMLElement;
  offlineBadge: HTMLElement;
  toast: HTMLElement;
}

function grab(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing #${id}`);
  return el;
}

function apiBase(): string {
  const override = new URLSearchParams(window.location.search).get("api");
  return override ?? "";
}

export async function boot(): Promise<void> {
  const canvas = grab("view") as HTMLCanvasElement;
  const surface = canvas.getContext("2d");
  if (surface === null) throw new Error("canvas 2d context unavailable");
  const ui: Ui = {
    canvas,
    surface,
    clusterLine: grab("cluster-line"),
    statusLine: grab("status-line"),
    progressLine: grab("progress-line"),
    offlineBadge: grab("offline-badge"),
    toast: grab("toast"),
  };

  const api = new ReviewApi(apiBase());
  const camera = new OrbitCamera();
  let session: ReviewSession;

  const queue = new SubmissionQueue(
    (s) => api.submitLabel(s.clusterId, s.label, "reviewer"),
    {
      onSaved: (s, summary) => {
        session.handleSaved(s, summary);
        void refreshProgress();
        paint();
      },
      onRejected: (s, status, detail) => {
        session.handleRejected(s, status, detail);
        toast(`label refused (${status}): ${detail}`);
        void showCurrent();
      },
      onOffline: (pending) => {
        ui.offlineBadge.textContent = `offline: ${pending} unsent`;
        ui.offlineBadge.hidden = false;
      },
      onOnline: () => {
        ui.offlineBadge.hidden = true;
      },
    },
  );
  window.addEventListener("online", () => {
    queue.flush();
  });

  let toastTimer: ReturnType<typeof setTimeout> | undefined;
  function toast(message: string): void {
    ui.toast.textContent = message;
    ui.toast.hidden = false;
    clearTimeout(toastTimer);
    toastTimer = setTimeout(() => {
      ui.toast.hidden = true;
    }, 4000);
  }

  function paint(): void {
    const state = session.current;
    if (state === null) {
      renderPlaceholder(ui.surface, canvas.width, canvas.height, "no clusters to review");
      ui.clusterLine.textContent = "queue empty";
      ui.statusLine.textContent = "";
      return;
    }
    const id = state.summary.cluster_id;
    const geometry = session.cachedGeometry(id);
    if (geometry === undefined) {
      renderPlaceholder(ui.surface, canvas.width, canvas.height, "loading geometry");
    } else {
      renderCluster(ui.surface, canvas.width, canvas.height, geometry.fibers, camera);
    }
    ui.clusterLine.textContent =
      `cluster ${id}  (${session.cursor + 1}/${session.length})  ` +
      `${state.summary.member_count} fibers, ${state.summary.mean_length_mm.toFixed(1)} mm`;
    const shown = state.optimisticLabel ?? state.summary.label;
    const labelText = shown === UNLABELED ? "unlabeled" : shown;
    ui.statusLine.textContent = `${labelText} [${state.save}]${state.lastError ? ` ${state.lastError}` : ""}`;
  }

  async function showCurrent(): Promise<void> {
    const state = session.current;
    if (state === null) {
      paint();
      return;
    }
    const id = state.summary.cluster_id;
    if (session.cachedGeometry(id) === undefined) {
      paint(); // loading placeholder
      try {
        const decimate =
          state.summary.member_count > MAX_RENDER_FIBERS ? MAX_RENDER_FIBERS : undefined;
        const geometry: ClusterGeometry = await api.geometry(id, decimate);
        session.cacheGeometry(geometry);
      } catch (error) {
        const detail = error instanceof ApiError ? error.detail : "network error";
        renderPlaceholder(ui.surface, canvas.width, canvas.height, `geometry unavailable: ${detail}`);
        return;
      }
    }
    const geometry = session.cachedGeometry(id);
    if (geometry !== undefined && session.current?.summary.cluster_id === id) {
      frameToFibers(camera, geometry.fibers, canvas.width / canvas.height);
      paint();
    }
  }

  async function refreshProgress(): Promise<void> {
    try {
      const p = await api.progress();
      const perNerve = Object.entries(p.per_nerve)
        .map(([nerve, count]) => `${nerve} ${count}`)
        .join(", ");
      ui.progressLine.textContent =
        `${p.labeled}/${p.total} reviewed, ${p.rejected} rejected` +
        (perNerve ? ` (${perNerve})` : "");
    } catch {
      // progress is cosmetic; never let it break the review loop
    }
  }

  window.addEventListener("keydown", (event) => {
    if (event.ctrlKey || event.metaKey || event.altKey) return;
    const action = actionForKey(event.key);
    if (action === null) return;
    event.preventDefault();
    switch (action.kind) {
      case "label":
        session.label(action.label);
        break;
      case "undo":
        session.undo();
        break;
      case "next":
        session.advance();
        break;
      case "prev":
        session.back();
        break;
    }
    void showCurrent();
  });

  let dragging = false;
  canvas.addEventListener("mousedown", () => {
    dragging = true;
  });
  window.addEventListener("mouseup", () => {
    dragging = false;
  });
  window.addEventListener("mousemove", (event) => {
    if (!dragging) return;
    camera.orbit(-event.movementX * 0.01, event.movementY * 0.01);
    paint();
  });
  canvas.addEventListener(
    "wheel",
    (event) => {
      event.preventDefault();
      camera.zoom(event.deltaY > 0 ? 1.1 : 1 / 1.1);
      paint();
    },
    { passive: false },
  );

  const legend = grab("legend");
  legend.textContent = NERVE_LABELS.map((label, i) => `${i + 1} ${label}`).join("   ") + "   r reject   u undo";

  try {
    const listing = await api.listClusters();
    session = new ReviewSession(listing.clusters, queue);
  } catch (error) {
    const detail = error instanceof ApiError ? error.detail : "service unreachable";
    renderPlaceholder(ui.surface, canvas.width, canvas.height, detail);
    return;
  }
  await refreshProgress();
  await showCurrent();
}
