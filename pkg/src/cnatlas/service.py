"""Local HTTP service for expert review and labeling of atlas clusters.

Serves cluster summaries and decimated geometry out of a saved atlas
directory and persists label decisions back into it.  Every successful
label mutation is written to disk before the response goes out, so a
restarted service always shows exactly the acknowledged state.  Label
writes are serialized through one lock; reads run concurrently.

The service binds to localhost use: it is a desk tool for working
through clusters one by one, not a deployment target.
"""

from __future__ import annotations

import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from .core import (
    Space,
    Tractogram,
    resample_streamline,
    sample_tractogram,
    streamline_length,
)
from .errors import ClusterNotFoundError
from .io.atlas_store import load_atlas, save_labels
from .pipeline import (
    Atlas,
    ClusterLabel,
    FiberCluster,
    NERVE_DISPLAY,
    apply_label,
    labeled_nerve_counts,
)

MAX_POINTS_PER_FIBER = 30
DEFAULT_PAGE_SIZE = 100


class LabelRequest(BaseModel):
    label: str
    rater: str = Field(min_length=1)


def _coerce_label(value: str) -> ClusterLabel:
    try:
        return ClusterLabel[value]
    except KeyError:
        pass
    try:
        return ClusterLabel(value)
    except ValueError:
        vocabulary = ", ".join(l.name for l in ClusterLabel)
        raise HTTPException(
            status_code=422, detail=f"unknown label {value!r}; expected one of {vocabulary}"
        ) from None


def _cluster_summary(a: Atlas, c: FiberCluster) -> dict:
    members = [a.fibers[r] for r in c.member_rows]
    if members:
        mean_length = sum(streamline_length(s) for s in members) / len(members)
        centroid = [
            float(v) for v in sum(s.points.mean(axis=0) for s in members) / len(members)
        ]
    else:
        mean_length = 0.0
        centroid = [0.0, 0.0, 0.0]
    return {
        "cluster_id": c.cluster_id,
        "member_count": len(c.member_rows),
        "mean_length_mm": mean_length,
        "centroid_mm": centroid,
        "label": c.label.name,
        "screened_nerve": None if c.screened_nerve is None else c.screened_nerve.name,
        "status": "pending" if c.label is ClusterLabel.UNLABELED else "reviewed",
    }


def create_app(atlas_dir: str | Path | None = None) -> FastAPI:
    """Build the review app, loading the atlas up front when a path is given."""
    app = FastAPI(title="cnatlas cluster review")
    app.add_middleware(
        CORSMiddleware,
        allow_origin_regex=r"http://(localhost|127\.0\.0\.1)(:\d+)?",
        allow_methods=["GET", "POST", "OPTIONS"],
        allow_headers=["*"],
    )
    app.state.atlas_dir = Path(atlas_dir) if atlas_dir is not None else None
    app.state.atlas = load_atlas(app.state.atlas_dir) if atlas_dir is not None else None
    app.state.write_lock = threading.Lock()

    def current_atlas() -> Atlas:
        atlas = app.state.atlas
        if atlas is None:
            raise HTTPException(status_code=503, detail="no atlas loaded")
        return atlas

    def find_cluster(atlas: Atlas, cluster_id: int) -> FiberCluster:
        try:
            return atlas.cluster(cluster_id)
        except ClusterNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    @app.get("/api/clusters")
    def list_clusters(
        offset: int = Query(default=0, ge=0),
        limit: int = Query(default=DEFAULT_PAGE_SIZE, ge=1, le=1000),
    ) -> dict:
        atlas = current_atlas()
        ordered = sorted(atlas.clusters, key=lambda c: c.cluster_id)
        page = ordered[offset : offset + limit]
        return {
            "clusters": [_cluster_summary(atlas, c) for c in page],
            "total": len(ordered),
            "offset": offset,
            "limit": limit,
        }

    @app.get("/api/clusters/{cluster_id}/geometry")
    def cluster_geometry(
        cluster_id: int, decimate: int | None = Query(default=None, ge=1)
    ) -> dict:
        atlas = current_atlas()
        c = find_cluster(atlas, cluster_id)
        members = [atlas.fibers[r] for r in c.member_rows]
        if decimate is not None and decimate < len(members):
            # seeded by cluster id so repeated fetches show the same fibers
            picked = sample_tractogram(
                Tractogram(tuple(members), space=Space.ATLAS), decimate, seed=cluster_id
            )
            members = list(picked)
        fibers = []
        for s in members:
            if len(s.points) > MAX_POINTS_PER_FIBER:
                s = resample_streamline(s, MAX_POINTS_PER_FIBER)
            fibers.append(s.points.tolist())
        return {"cluster_id": cluster_id, "fiber_count": len(fibers), "fibers": fibers}

    @app.post("/api/clusters/{cluster_id}/label")
    def label_cluster(cluster_id: int, request: LabelRequest) -> dict:
        label = _coerce_label(request.label)
        with app.state.write_lock:
            atlas = current_atlas()
            find_cluster(atlas, cluster_id)
            updated = apply_label(atlas, cluster_id, label, request.rater)
            # persist first; the response must never acknowledge a lost write
            save_labels(updated, app.state.atlas_dir)
            app.state.atlas = updated
            return _cluster_summary(updated, updated.cluster(cluster_id))

    @app.get("/api/progress")
    def progress() -> dict:
        atlas = current_atlas()
        labeled = sum(1 for c in atlas.clusters if c.label is not ClusterLabel.UNLABELED)
        rejected = sum(1 for c in atlas.clusters if c.label is ClusterLabel.REJECTED)
        per_nerve = {
            NERVE_DISPLAY[nerve]: count
            for nerve, count in labeled_nerve_counts(atlas).items()
        }
        return {
            "labeled": labeled,
            "total": len(atlas.clusters),
            "rejected": rejected,
            "per_nerve": per_nerve,
        }

    return app
