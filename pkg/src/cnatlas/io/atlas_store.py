"""Directory persistence for clustered atlases.

One atlas is one directory: a JSON manifest carrying parameters,
provenance, and a checksummed file inventory; binary matrix blobs for
the embedding and centroids; canonical TCK geometry for the pooled
fibers and for each cluster; JSON cluster metadata and an append-only
JSON-lines label audit.  Every writer is byte-deterministic, so saving
the same atlas twice gives identical directories and the checksums are
meaningful.  Eigenvalues stay in the manifest as JSON floats: they are
validated to be descending and float32 quantization could break ties.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from ..core import DistanceKind, Nerve, Space, Streamline, Tractogram, TrackingPreset
from ..errors import AtlasVersionError, CnAtlasError, CorruptAtlasError, InvalidConfigError
from ..pipeline import (
    Atlas,
    AtlasStage,
    AtlasStageConfig,
    ClusterLabel,
    FiberCluster,
    LabelEvent,
)
from ..spectral import AffinityParams, SpectralEmbedding
from .blob import read_matrix, write_matrix
from .tck import read_tck, write_tck

FORMAT_VERSION = 1

_MANIFEST = "manifest.json"
_POOLED = "pooled.tck"
_BASIS = "embedding_basis.mat"
_COORDS = "embedding_coords.mat"
_DEGREES = "embedding_degrees.mat"
_LANDMARKS = "embedding_landmarks.mat"
_CENTROIDS = "centroids.mat"
_LABELS = "labels.json"
_AUDIT = "label_audit.jsonl"
_CLUSTER_DIR = "clusters"
_PROVENANCE = "provenance.json"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_record(cfg: AtlasStageConfig) -> dict:
    """Stage parameters as a plain JSON-ready mapping."""
    return dataclasses.asdict(cfg)


def _config_from_record(rec) -> AtlasStageConfig:
    try:
        return AtlasStageConfig(**rec)
    except (TypeError, CnAtlasError) as exc:
        raise CorruptAtlasError(f"bad stage parameters in manifest: {exc}") from exc


def _preset_record(p: TrackingPreset) -> dict:
    rec = dataclasses.asdict(p)
    rec["nerve"] = p.nerve.value
    return rec


def _preset_from_record(rec) -> TrackingPreset:
    try:
        rec = dict(rec)
        rec["nerve"] = Nerve(rec["nerve"])
        return TrackingPreset(**rec)
    except (TypeError, KeyError, ValueError, CnAtlasError) as exc:
        raise CorruptAtlasError(f"bad tracking preset in manifest: {exc}") from exc


def _cluster_record(c: FiberCluster) -> dict:
    return {
        "cluster_id": c.cluster_id,
        "member_rows": list(c.member_rows),
        "member_subjects": list(c.member_subjects),
        "member_source_ids": list(c.member_source_ids),
        "label": c.label.value,
        "screened_nerve": None if c.screened_nerve is None else c.screened_nerve.value,
        "flags": list(c.flags),
    }


def _audit_lines(a: Atlas) -> str:
    lines = []
    for e in a.audit_log:
        lines.append(
            _canonical_json(
                {
                    "cluster_id": e.cluster_id,
                    "label": e.label.value,
                    "rater": e.rater,
                    "timestamp": e.timestamp,
                }
            )
        )
    return "".join(line + "\n" for line in lines)


def _labels_payload(a: Atlas) -> str:
    return _dump_json({"clusters": [_cluster_record(c) for c in a.clusters]})


def _cluster_tck_name(cluster_id: int) -> str:
    return f"{_CLUSTER_DIR}/cluster_{cluster_id:05d}.tck"


def save_atlas(a: Atlas, directory: str | Path) -> None:
    """Write the atlas directory; manifest (with checksums) goes last."""
    d = Path(directory)
    (d / _CLUSTER_DIR).mkdir(parents=True, exist_ok=True)
    emb = a.embedding
    m, p, _ = emb.landmarks.shape

    write_tck(a.fibers, d / _POOLED)
    write_matrix(d / _BASIS, emb.basis)
    write_matrix(d / _COORDS, emb.coords)
    write_matrix(d / _DEGREES, emb.degree_vector.reshape(-1, 1))
    write_matrix(d / _LANDMARKS, emb.landmarks.reshape(m, p * 3))
    if a.clusters:
        centroids = np.stack([c.centroid for c in a.clusters])
    else:
        centroids = np.zeros((0, emb.dim))
    write_matrix(d / _CENTROIDS, centroids)
    (d / _LABELS).write_text(_labels_payload(a))
    (d / _AUDIT).write_text(_audit_lines(a))
    (d / _PROVENANCE).write_text(
        _dump_json(
            {"subjects": list(a.fiber_subjects), "source_ids": list(a.fiber_source_ids)}
        )
    )

    wanted = set()
    for c in a.clusters:
        rel = _cluster_tck_name(c.cluster_id)
        wanted.add(rel)
        members = tuple(
            Streamline(a.fibers[r].points, id=j) for j, r in enumerate(c.member_rows)
        )
        write_tck(Tractogram(members, space=Space.ATLAS), d / rel)
    for stale in (d / _CLUSTER_DIR).glob("cluster_*.tck"):
        if f"{_CLUSTER_DIR}/{stale.name}" not in wanted:
            stale.unlink()

    inventory = {}
    for path in sorted(d.rglob("*")):
        if path.is_file() and path.name != _MANIFEST:
            inventory[path.relative_to(d).as_posix()] = _sha256(path)
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": a.stage.value,
        "stages": {
            "stage1": config_record(a.stage1_config),
            "stage2": None if a.stage2_config is None else config_record(a.stage2_config),
        },
        "embedding": {
            "sigma_mm": emb.params.sigma_mm,
            "distance_kind": emb.params.kind.value,
            "points_per_fiber": emb.params.points_per_fiber,
            "points_per_landmark": p,
            "truncated": emb.truncated,
            "eigenvalues": [float(v) for v in emb.eigenvalues],
            "landmark_ids": [int(i) for i in emb.landmark_ids],
        },
        "tracking_presets": [_preset_record(t) for t in a.tracking_presets],
        "registration": json.loads(a.registration_record),
        "files": inventory,
    }
    (d / _MANIFEST).write_text(_dump_json(manifest))


def _read_manifest(d: Path) -> dict:
    path = d / _MANIFEST
    if not path.is_file():
        raise CorruptAtlasError(f"no manifest at {path}")
    try:
        manifest = json.loads(path.read_text())
    except ValueError as exc:
        raise CorruptAtlasError(f"manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise AtlasVersionError(f"atlas format {version!r}, supported {FORMAT_VERSION}")
    return manifest


def _verify_inventory(d: Path, manifest: dict) -> None:
    for rel in sorted(manifest.get("files", {})):
        path = d / rel
        if not path.is_file():
            raise CorruptAtlasError(f"inventoried file missing: {rel}")
        if _sha256(path) != manifest["files"][rel]:
            raise CorruptAtlasError(f"checksum mismatch for {rel}")


def load_atlas(directory: str | Path) -> Atlas:
    """Read an atlas directory back after verifying every checksum."""
    d = Path(directory)
    manifest = _read_manifest(d)
    _verify_inventory(d, manifest)
    try:
        return _reassemble(d, manifest)
    except (AtlasVersionError, CorruptAtlasError):
        raise
    except (CnAtlasError, KeyError, TypeError, ValueError) as exc:
        raise CorruptAtlasError(f"atlas directory is inconsistent: {exc}") from exc


def _reassemble(d: Path, manifest: dict) -> Atlas:
    fibers = read_tck(d / _POOLED, subject_id="", space=Space.ATLAS)
    basis = read_matrix(d / _BASIS)
    coords = read_matrix(d / _COORDS)
    degrees = read_matrix(d / _DEGREES).ravel()
    emeta = manifest["embedding"]
    p = int(emeta["points_per_landmark"])
    flat = read_matrix(d / _LANDMARKS)
    landmarks = flat.reshape(flat.shape[0], p, 3).astype(np.float64)
    params = AffinityParams(
        sigma_mm=float(emeta["sigma_mm"]),
        kind=DistanceKind(emeta["distance_kind"]),
        points_per_fiber=int(emeta["points_per_fiber"]),
    )
    embedding = SpectralEmbedding(
        landmarks=landmarks,
        landmark_ids=np.asarray(emeta["landmark_ids"], dtype=np.int64),
        eigenvalues=np.asarray(emeta["eigenvalues"], dtype=np.float64),
        basis=basis,
        degree_vector=degrees,
        coords=coords,
        params=params,
        truncated=bool(emeta["truncated"]),
    )
    if coords.shape[0] != len(fibers):
        raise CorruptAtlasError(
            f"{coords.shape[0]} embedding rows but {len(fibers)} pooled fibers"
        )

    labels = json.loads((d / _LABELS).read_text())
    centroids = read_matrix(d / _CENTROIDS)
    records = labels["clusters"]
    if centroids.shape[0] != len(records):
        raise CorruptAtlasError(
            f"{centroids.shape[0]} centroid rows for {len(records)} clusters"
        )
    clusters = []
    for row, rec in zip(centroids, records):
        nerve = rec["screened_nerve"]
        clusters.append(
            FiberCluster(
                cluster_id=rec["cluster_id"],
                member_rows=tuple(rec["member_rows"]),
                member_subjects=tuple(rec["member_subjects"]),
                member_source_ids=tuple(rec["member_source_ids"]),
                centroid=row,
                label=ClusterLabel(rec["label"]),
                screened_nerve=None if nerve is None else Nerve(nerve),
                flags=tuple(rec["flags"]),
            )
        )

    audit = []
    for line in (d / _AUDIT).read_text().splitlines():
        rec = json.loads(line)
        audit.append(
            LabelEvent(rec["cluster_id"], ClusterLabel(rec["label"]), rec["rater"], rec["timestamp"])
        )

    provenance = json.loads((d / _PROVENANCE).read_text())
    stage2 = manifest["stages"]["stage2"]
    return Atlas(
        stage=AtlasStage(manifest["stage"]),
        fibers=fibers,
        embedding=embedding,
        clusters=tuple(clusters),
        stage1_config=_config_from_record(manifest["stages"]["stage1"]),
        stage2_config=None if stage2 is None else _config_from_record(stage2),
        tracking_presets=tuple(
            _preset_from_record(r) for r in manifest["tracking_presets"]
        ),
        audit_log=tuple(audit),
        fiber_subjects=tuple(provenance["subjects"]),
        fiber_source_ids=tuple(provenance["source_ids"]),
        registration_record=_canonical_json(manifest["registration"]),
    )


def save_labels(a: Atlas, directory: str | Path) -> None:
    """Rewrite only labels and audit log for an already-saved atlas.

    Cluster membership must be unchanged; this is the cheap durable path
    for labeling sessions, leaving geometry and embedding blobs alone.
    """
    d = Path(directory)
    manifest = _read_manifest(d)
    labels_path = d / _LABELS
    if not labels_path.is_file():
        raise CorruptAtlasError(f"no cluster metadata at {labels_path}")
    try:
        previous = json.loads(labels_path.read_text())["clusters"]
    except (ValueError, KeyError) as exc:
        raise CorruptAtlasError(f"bad cluster metadata: {exc}") from exc
    current = [_cluster_record(c) for c in a.clusters]
    strip = ("label", "screened_nerve", "flags")
    membership_now = [{k: v for k, v in rec.items() if k not in strip} for rec in current]
    membership_was = [
        {k: v for k, v in rec.items() if k not in strip} for rec in previous
    ]
    if membership_now != membership_was:
        raise InvalidConfigError("labels-only update cannot change cluster membership")
    (d / _LABELS).write_text(_labels_payload(a))
    (d / _AUDIT).write_text(_audit_lines(a))
    manifest["files"][_LABELS] = _sha256(d / _LABELS)
    manifest["files"][_AUDIT] = _sha256(d / _AUDIT)
    (d / _MANIFEST).write_text(_dump_json(manifest))
