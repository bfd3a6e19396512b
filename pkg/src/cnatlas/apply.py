"""Automated nerve identification for new subjects against a labeled atlas.

A subject tractogram is registered onto the atlas landmark fibers, every
fiber is embedded through the stored spectral basis and assigned to its
nearest cluster centroid, assignments landing on clusters without an
expert nerve label are discarded, the survivors pass the same per-cluster
outlier removal the atlas itself was built with, and the resulting
bundles come back grouped by nerve label in subject space.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .core import (
    AffineTransform,
    Space,
    Streamline,
    Tractogram,
    filter_by_length,
    transform_tractogram,
)
from .errors import CnAtlasError, EmptySubjectError, InvalidConfigError
from .pipeline import (
    NERVE_FOR_LABEL,
    Atlas,
    AtlasStage,
    ClusterLabel,
    FiberCluster,
    remove_outliers,
)
from .registration import RegistrationConfig, register_to_reference
from .spectral import EmbeddedFibers, embed_new_fibers

# Expert labels that name a nerve (everything except unlabeled/rejected).
CN_LABELS = tuple(NERVE_FOR_LABEL)

# Default proximity gate: a fiber counts as on-atlas only when some
# landmark fiber sits within half a kernel width of it.
DEFAULT_MAX_LANDMARK_DISTANCE = 0.5


@dataclass(frozen=True)
class IdentifyConfig:
    """Knobs for end-to-end identification of one subject."""

    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    min_streamlines: int = 1
    min_length_mm: float = 20.0
    outlier_removal: bool = True
    max_landmark_distance: float = DEFAULT_MAX_LANDMARK_DISTANCE

    def __post_init__(self) -> None:
        if self.min_streamlines < 1:
            raise InvalidConfigError("min_streamlines must be at least 1")
        if self.min_length_mm < 0:
            raise InvalidConfigError("min_length_mm must be non-negative")
        if self.max_landmark_distance <= 0:
            raise InvalidConfigError("max_landmark_distance must be positive")


@dataclass(frozen=True, eq=False)
class StreamlineAssignment:
    """Per-fiber nearest-cluster assignment over an enhanced atlas.

    ``cluster_ids`` holds the winning cluster id per fiber, -1 where the
    fiber was too far from every landmark to embed; ``kept`` marks fibers
    whose winner carries an expert nerve label.  ``coords`` are the
    embedded coordinates, row-aligned with the input tractogram.
    """

    cluster_ids: np.ndarray
    scores: np.ndarray
    kept: np.ndarray
    low_confidence: np.ndarray
    coords: np.ndarray


@dataclass(frozen=True, eq=False)
class IdentificationResult:
    """Per-nerve bundles for one subject, in subject space.

    Keys cover every expert label; a nerve absent from the subject is
    present with an empty bundle and a false flag.
    """

    bundles: dict[ClusterLabel, Tractogram]
    counts: dict[ClusterLabel, int]
    identified: dict[ClusterLabel, bool]
    transform: AffineTransform
    low_confidence_count: int


@contextmanager
def _stage(name: str):
    """Tag any toolkit error escaping the block with its pipeline stage."""
    try:
        yield
    except CnAtlasError as exc:
        exc.args = (f"{name}: {exc}",) if exc.args else (name,)
        raise


def landmark_tractogram(a: Atlas) -> Tractogram:
    """The atlas landmark fibers as a tractogram in atlas space."""
    points = np.asarray(a.embedding.landmarks, dtype=np.float64)
    fibers = tuple(Streamline(p, id=i) for i, p in enumerate(points))
    return Tractogram(fibers, subject_id="", space=Space.ATLAS)


def register_subject_to_atlas(
    subject: Tractogram, atlas: Atlas, cfg: RegistrationConfig
) -> AffineTransform:
    """Affine mapping the subject onto the fixed atlas landmark fibers."""
    if len(subject) == 0:
        raise EmptySubjectError("subject has no fibers to register")
    transform, _ = register_to_reference(subject, landmark_tractogram(atlas), cfg)
    return transform


def assign_streamlines(
    subject_in_atlas_space: Tractogram,
    atlas: Atlas,
    *,
    max_landmark_distance: float = DEFAULT_MAX_LANDMARK_DISTANCE,
) -> StreamlineAssignment:
    """Nearest labeled-centroid assignment for fibers already in atlas space.

    Every cluster competes, so fibers whose nearest centroid belongs to a
    rejected or unlabeled cluster are marked not kept: those clusters act
    as sinks absorbing geometry the atlas deliberately excluded.  Fibers
    farther than ``max_landmark_distance`` kernel widths from every
    landmark are flagged low-confidence and never assigned; embedding
    coordinates are unit-normalized, so this raw kernel gate is the only
    place absolute distance to the atlas still matters.
    """
    if max_landmark_distance <= 0:
        raise InvalidConfigError("max_landmark_distance must be positive")
    if atlas.stage is not AtlasStage.ENHANCED:
        raise InvalidConfigError("assignment needs an enhanced-stage atlas")
    clusters = atlas.clusters
    if not any(c.label in NERVE_FOR_LABEL for c in clusters):
        raise InvalidConfigError("atlas has no expert-labeled clusters")
    n = len(subject_in_atlas_space)
    if n == 0:
        empty = np.zeros(0)
        return StreamlineAssignment(
            cluster_ids=np.zeros(0, dtype=np.int64),
            scores=empty,
            kept=np.zeros(0, dtype=bool),
            low_confidence=np.zeros(0, dtype=bool),
            coords=np.zeros((0, atlas.embedding.dim)),
        )
    min_kernel = float(np.exp(-(max_landmark_distance**2)))
    emb = embed_new_fibers(atlas.embedding, subject_in_atlas_space, min_kernel=min_kernel)
    centroids = np.stack([c.centroid for c in clusters])
    similarity = emb.coords @ centroids.T
    winner = np.argmax(similarity, axis=1)
    scores = similarity[np.arange(n), winner]
    cluster_ids = np.array([clusters[j].cluster_id for j in winner], dtype=np.int64)
    labeled = np.array([clusters[j].label in NERVE_FOR_LABEL for j in winner])
    low = emb.low_confidence
    cluster_ids[low] = -1
    scores = np.where(low, 0.0, scores)
    return StreamlineAssignment(
        cluster_ids=cluster_ids,
        scores=scores,
        kept=labeled & ~low,
        low_confidence=low,
        coords=emb.coords,
    )


def _atlas_outlier_params(atlas: Atlas) -> tuple[float, int]:
    cfg = atlas.stage2_config if atlas.stage2_config is not None else atlas.stage1_config
    return cfg.outlier_std, cfg.outlier_iterations


def identify(
    subject: Tractogram, atlas: Atlas, cfg: IdentifyConfig | None = None
) -> IdentificationResult:
    """Find the subject-specific fiber bundle of every labeled nerve.

    Register, assign, trim per-cluster outliers with the parameters the
    atlas was built with, then group surviving fibers by nerve label.
    Bundles keep the original subject-space geometry and fiber ids, and
    a nerve counts as identified when its bundle reaches
    ``min_streamlines`` fibers.  Errors carry the failing stage's name.
    """
    cfg = IdentifyConfig() if cfg is None else cfg
    with _stage("filter"):
        filtered = filter_by_length(subject, cfg.min_length_mm)
        if len(filtered) == 0:
            raise EmptySubjectError(
                f"no fibers at least {cfg.min_length_mm:g} mm long"
            )
    with _stage("register"):
        transform = register_subject_to_atlas(filtered, atlas, cfg.registration)
    with _stage("assign"):
        in_atlas = transform_tractogram(filtered, transform, space=Space.ATLAS)
        assignment = assign_streamlines(
            in_atlas, atlas, max_landmark_distance=cfg.max_landmark_distance
        )

    kept_rows: dict[ClusterLabel, list[int]] = {label: [] for label in CN_LABELS}
    with _stage("outlier"):
        std_c, iterations = _atlas_outlier_params(atlas)
        coords = EmbeddedFibers(
            coords=assignment.coords, low_confidence=assignment.low_confidence
        )
        subject_name = filtered.subject_id or ""
        for c in atlas.clusters:
            if c.label not in NERVE_FOR_LABEL:
                continue
            rows = np.flatnonzero(
                assignment.kept & (assignment.cluster_ids == c.cluster_id)
            )
            if rows.size == 0:
                continue
            group = FiberCluster(
                cluster_id=c.cluster_id,
                member_rows=tuple(int(r) for r in rows),
                member_subjects=(subject_name,) * rows.size,
                member_source_ids=tuple(int(filtered[r].id) for r in rows),
                centroid=c.centroid,
                label=c.label,
            )
            if cfg.outlier_removal:
                for _ in range(iterations):
                    group = remove_outliers(group, coords, std_c)
            kept_rows[c.label].extend(group.member_rows)

    bundles = {}
    counts = {}
    identified = {}
    for label in CN_LABELS:
        rows = sorted(kept_rows[label])
        fibers = tuple(filtered[r] for r in rows)
        bundles[label] = Tractogram(
            fibers, subject_id=subject.subject_id, space=subject.space
        )
        counts[label] = len(fibers)
        identified[label] = len(fibers) >= cfg.min_streamlines
    return IdentificationResult(
        bundles=bundles,
        counts=counts,
        identified=identified,
        transform=transform,
        low_confidence_count=int(assignment.low_confidence.sum()),
    )
