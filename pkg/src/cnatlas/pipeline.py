"""Two-stage fiber clustering with anatomy screening and expert labeling.

Stage 1 pools seeded per-subject samples of registered tractograms,
embeds and clusters them at a coarse grain, and prunes per-cluster
outliers.  Mask screening then assigns each cluster a nerve or rejects
it.  Stage 2 merges the screened members and re-clusters them finely so
raters can label individual clusters; every labeling action is kept in
an append-only audit log on the atlas.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .core import (
    DEFAULT_TRACKING_PRESETS,
    MaskVolume,
    Nerve,
    Space,
    Streamline,
    TrackingPreset,
    Tractogram,
    filter_by_length,
    sample_tractogram,
    tractogram_mask_hits,
)
from .errors import (
    ArityError,
    ClusterNotFoundError,
    EmptyInputError,
    EmptySubjectError,
    InvalidConfigError,
    InvalidKError,
)
from .spectral import (
    AffinityParams,
    EmbeddedFibers,
    SpectralEmbedding,
    kmeans_embedding,
    nystrom_embed,
)


class AtlasStage(Enum):
    INITIAL = "initial"
    ENHANCED = "enhanced"


class ClusterLabel(Enum):
    """Expert vocabulary: two bookkeeping states plus per-branch names."""

    UNLABELED = "unlabeled"
    REJECTED = "rejected"
    CN_II_D = "CN_II_D"
    CN_II_N = "CN_II_N"
    CN_III_L = "CN_III_L"
    CN_III_R = "CN_III_R"
    CN_V_L = "CN_V_L"
    CN_V_R = "CN_V_R"
    CN_VII_VIII_L = "CN_VII_VIII_L"
    CN_VII_VIII_R = "CN_VII_VIII_R"


NERVE_FOR_LABEL: Mapping[ClusterLabel, Nerve] = {
    ClusterLabel.CN_II_D: Nerve.CN_II,
    ClusterLabel.CN_II_N: Nerve.CN_II,
    ClusterLabel.CN_III_L: Nerve.CN_III,
    ClusterLabel.CN_III_R: Nerve.CN_III,
    ClusterLabel.CN_V_L: Nerve.CN_V,
    ClusterLabel.CN_V_R: Nerve.CN_V,
    ClusterLabel.CN_VII_VIII_L: Nerve.CN_VII_VIII,
    ClusterLabel.CN_VII_VIII_R: Nerve.CN_VII_VIII,
}

NERVE_DISPLAY: Mapping[Nerve, str] = {
    Nerve.CN_II: "CN II",
    Nerve.CN_III: "CN III",
    Nerve.CN_V: "CN V",
    Nerve.CN_VII_VIII: "CN VII/VIII",
}


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# Upstream deformable-registration provenance carried into every atlas
# manifest: control grid size and the coarse-to-fine kernel schedule in mm.
DEFAULT_REGISTRATION_RECORD = _canonical_json(
    {"bspline_grid": [8, 8, 8], "sigma_schedule": [20.0, 10.0, 5.0, 2.0]}
)


@dataclass(frozen=True)
class AtlasStageConfig:
    """Knobs for one clustering stage.

    Defaults are the full-cohort stage-1 settings; :meth:`enhanced` gives
    the stage-2 variant.  Every field stays overridable so small desk
    runs are expressible.  Stage 2 reads ``sample_per_subject`` as the
    total budget for the merged pool rather than a per-subject quota.
    """

    k: int = 6000
    outlier_std: float = 2.0
    outlier_iterations: int = 2
    sample_per_subject: int = 20000
    min_length_mm: float = 20.0
    affinity_sigma_mm: float = 30.0
    embedding_dim: int = 10
    landmark_count: int = 2000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise InvalidKError("cluster count must be at least 1")
        if self.outlier_std <= 0:
            raise InvalidConfigError("outlier threshold must be positive")
        if self.outlier_iterations < 0:
            raise InvalidConfigError("outlier iterations must be non-negative")
        if self.sample_per_subject < 1:
            raise InvalidConfigError("sample size must be at least 1")
        if self.min_length_mm < 0:
            raise InvalidConfigError("length filter must be non-negative")
        if self.affinity_sigma_mm <= 0:
            raise InvalidConfigError("kernel width must be positive")
        if self.embedding_dim < 1:
            raise InvalidConfigError("embedding dimension must be at least 1")
        if self.landmark_count <= self.embedding_dim:
            raise InvalidConfigError("landmark count must exceed the embedding dimension")

    @classmethod
    def initial(cls) -> "AtlasStageConfig":
        return cls()

    @classmethod
    def enhanced(cls) -> "AtlasStageConfig":
        return cls(k=200, outlier_std=1.0, outlier_iterations=1, affinity_sigma_mm=20.0)


@dataclass(frozen=True)
class LabelEvent:
    """One labeling action: who set what, on which cluster, and when."""

    cluster_id: int
    label: ClusterLabel
    rater: str
    timestamp: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "cluster_id", int(self.cluster_id))
        if not isinstance(self.label, ClusterLabel):
            object.__setattr__(self, "label", ClusterLabel(self.label))
        if not isinstance(self.rater, str) or not self.rater:
            raise InvalidConfigError("rater must be a non-empty string")
        if not isinstance(self.timestamp, str) or not self.timestamp:
            raise InvalidConfigError("timestamp must be a non-empty string")


@dataclass(frozen=True, eq=False)
class FiberCluster:
    """One cluster over the pooled atlas fibers.

    ``member_rows`` index the atlas's pooled tractogram and embedding;
    the parallel provenance tuples name each member's source subject and
    its fiber id there.  ``screened_nerve`` carries the mask-screening
    assignment, separate from the expert ``label``.
    """

    cluster_id: int
    member_rows: tuple[int, ...]
    member_subjects: tuple[str, ...]
    member_source_ids: tuple[int, ...]
    centroid: np.ndarray
    label: ClusterLabel = ClusterLabel.UNLABELED
    screened_nerve: Nerve | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "cluster_id", int(self.cluster_id))
        rows = tuple(int(r) for r in self.member_rows)
        subjects = tuple(str(s) for s in self.member_subjects)
        sources = tuple(int(i) for i in self.member_source_ids)
        if not (len(rows) == len(subjects) == len(sources)):
            raise ArityError("member provenance tuples must have one entry per member")
        object.__setattr__(self, "member_rows", rows)
        object.__setattr__(self, "member_subjects", subjects)
        object.__setattr__(self, "member_source_ids", sources)
        flags = tuple(str(f) for f in self.flags)
        object.__setattr__(self, "flags", flags)
        if not rows and "pruned" not in flags:
            raise InvalidConfigError("an empty cluster must carry the 'pruned' flag")
        centroid = np.asarray(self.centroid, dtype=np.float64)
        if centroid.ndim != 1:
            raise InvalidConfigError("centroid must be a flat embedding-space vector")
        centroid = centroid.copy()
        centroid.flags.writeable = False
        object.__setattr__(self, "centroid", centroid)
        if not isinstance(self.label, ClusterLabel):
            object.__setattr__(self, "label", ClusterLabel(self.label))
        if self.screened_nerve is not None and not isinstance(self.screened_nerve, Nerve):
            raise InvalidConfigError("screened_nerve must be a Nerve or None")

    @property
    def n_members(self) -> int:
        return len(self.member_rows)


@dataclass(frozen=True, eq=False)
class Atlas:
    """A clustered pooled tractogram plus everything needed to reuse it.

    Pooled fiber ids equal their row numbers, so ``member_rows`` index
    ``fibers`` and ``embedding.coords`` interchangeably.  The per-row
    provenance tuples let any fiber be traced back to its subject.
    """

    stage: AtlasStage
    fibers: Tractogram
    embedding: SpectralEmbedding
    clusters: tuple[FiberCluster, ...]
    stage1_config: AtlasStageConfig
    stage2_config: AtlasStageConfig | None = None
    tracking_presets: tuple[TrackingPreset, ...] = DEFAULT_TRACKING_PRESETS
    audit_log: tuple[LabelEvent, ...] = ()
    fiber_subjects: tuple[str, ...] = ()
    fiber_source_ids: tuple[int, ...] = ()
    registration_record: str = DEFAULT_REGISTRATION_RECORD

    def __post_init__(self) -> None:
        if not isinstance(self.stage, AtlasStage):
            object.__setattr__(self, "stage", AtlasStage(self.stage))
        try:
            record = _canonical_json(json.loads(self.registration_record))
        except (TypeError, ValueError) as exc:
            raise InvalidConfigError(f"registration record must be JSON text: {exc}") from exc
        object.__setattr__(self, "registration_record", record)
        object.__setattr__(self, "clusters", tuple(self.clusters))
        object.__setattr__(self, "tracking_presets", tuple(self.tracking_presets))
        object.__setattr__(self, "audit_log", tuple(self.audit_log))
        n = len(self.fibers)
        if [s.id for s in self.fibers] != list(range(n)):
            raise InvalidConfigError("pooled fiber ids must equal their row numbers")
        if self.embedding.coords.shape[0] != n:
            raise ArityError("embedding must have one row per pooled fiber")
        subjects = self.fiber_subjects or ("",) * n
        sources = self.fiber_source_ids or tuple(range(n))
        subjects = tuple(str(s) for s in subjects)
        sources = tuple(int(i) for i in sources)
        if len(subjects) != n or len(sources) != n:
            raise ArityError("per-row provenance must have one entry per pooled fiber")
        object.__setattr__(self, "fiber_subjects", subjects)
        object.__setattr__(self, "fiber_source_ids", sources)
        seen_ids = set()
        for c in self.clusters:
            if c.cluster_id in seen_ids:
                raise InvalidConfigError(f"duplicate cluster id {c.cluster_id}")
            seen_ids.add(c.cluster_id)
            for r in c.member_rows:
                if not 0 <= r < n:
                    raise InvalidConfigError(f"member row {r} outside pooled range")

    def cluster(self, cluster_id: int) -> FiberCluster:
        for c in self.clusters:
            if c.cluster_id == cluster_id:
                return c
        raise ClusterNotFoundError(f"no cluster with id {cluster_id}")


# ---------------------------------------------------------------------------
# outlier removal


def remove_outliers(
    c: FiberCluster, e: SpectralEmbedding | EmbeddedFibers, std_c: float
) -> FiberCluster:
    """Drop members far from the rest of their own cluster.

    Each member scores the mean embedding similarity to its co-members;
    members scoring below mean minus ``std_c`` standard deviations go.
    At most half the members are removed in one pass, and a singleton
    cluster comes back unchanged with a ``singleton`` flag.
    """
    if std_c <= 0:
        raise InvalidConfigError("outlier threshold must be positive")
    n = c.n_members
    if n == 0:
        return c
    if n == 1:
        if "singleton" in c.flags:
            return c
        return replace(c, flags=c.flags + ("singleton",))
    rows = np.asarray(c.member_rows, dtype=np.int64)
    x = e.coords[rows]
    g = x @ x.T
    scores = (g.sum(axis=1) - np.diag(g)) / (n - 1)
    cut = scores.mean() - std_c * scores.std()
    drop = np.flatnonzero(scores < cut)
    if drop.size == 0:
        return c
    cap = n // 2
    if drop.size > cap:
        order = np.argsort(scores[drop], kind="stable")
        drop = drop[order[:cap]]
    keep = np.setdiff1d(np.arange(n), drop)
    centroid = x[keep].mean(axis=0)
    nrm = float(np.linalg.norm(centroid))
    if nrm > 0:
        centroid = centroid / nrm
    else:
        centroid = c.centroid
    return replace(
        c,
        member_rows=tuple(int(rows[i]) for i in keep),
        member_subjects=tuple(c.member_subjects[i] for i in keep),
        member_source_ids=tuple(c.member_source_ids[i] for i in keep),
        centroid=centroid,
    )


# ---------------------------------------------------------------------------
# stage builders


def _embed_and_cluster(
    pooled: Tractogram,
    subjects: Sequence[str],
    source_ids: Sequence[int],
    cfg: AtlasStageConfig,
    k: int,
) -> tuple[SpectralEmbedding, tuple[FiberCluster, ...]]:
    n = len(pooled)
    m = min(cfg.landmark_count, n)
    t_dim = min(cfg.embedding_dim, m - 1)
    emb = nystrom_embed(
        pooled, m, AffinityParams(sigma_mm=cfg.affinity_sigma_mm), t=t_dim, seed=cfg.seed
    )
    km = kmeans_embedding(emb, k, seed=cfg.seed)
    clusters = []
    for j in range(km.k):
        members = np.flatnonzero(km.labels == j)
        if members.size == 0:  # k-means reseeds empties; defensive only
            continue
        clusters.append(
            FiberCluster(
                cluster_id=j,
                member_rows=tuple(int(r) for r in members),
                member_subjects=tuple(subjects[r] for r in members),
                member_source_ids=tuple(source_ids[r] for r in members),
                centroid=km.centroids[j],
            )
        )
    out = tuple(clusters)
    for _ in range(cfg.outlier_iterations):
        out = tuple(remove_outliers(c, emb, cfg.outlier_std) for c in out)
    return emb, out


def build_stage1(subjects: Sequence[Tractogram], cfg: AtlasStageConfig) -> Atlas:
    """Pool, embed, and coarsely cluster registered subject tractograms.

    Each subject is length-filtered, then sampled down to
    ``cfg.sample_per_subject`` fibers with a per-subject seed.  The pool
    is clustered at ``cfg.k`` and each cluster pruned for
    ``cfg.outlier_iterations`` passes.  All clusters start unlabeled.
    """
    subs = list(subjects)
    if not subs:
        raise EmptyInputError("need at least one subject tractogram")
    fibers: list[Streamline] = []
    names: list[str] = []
    source_ids: list[int] = []
    for idx, t in enumerate(subs):
        kept = filter_by_length(t, cfg.min_length_mm)
        if len(kept) == 0:
            who = t.subject_id or f"#{idx}"
            raise EmptySubjectError(
                f"subject {who} has no fibers of at least {cfg.min_length_mm} mm"
            )
        sampled = sample_tractogram(kept, cfg.sample_per_subject, seed=cfg.seed + idx)
        name = t.subject_id or f"subject{idx:03d}"
        for s in sampled:
            fibers.append(Streamline(s.points, id=len(fibers)))
            names.append(name)
            source_ids.append(int(s.id))
    pooled = Tractogram(tuple(fibers), space=Space.ATLAS)
    if len(pooled) < cfg.k:
        raise InvalidKError(f"K={cfg.k} exceeds the {len(pooled)} pooled fibers")
    emb, clusters = _embed_and_cluster(pooled, names, source_ids, cfg, cfg.k)
    return Atlas(
        stage=AtlasStage.INITIAL,
        fibers=pooled,
        embedding=emb,
        clusters=clusters,
        stage1_config=cfg,
        fiber_subjects=tuple(names),
        fiber_source_ids=tuple(source_ids),
    )


def screen_clusters_by_roi(
    a: Atlas,
    rois: Mapping[Nerve, Sequence[MaskVolume]],
    roas: Mapping[Nerve, Sequence[MaskVolume]] | None = None,
    theta: float = 0.6,
) -> Atlas:
    """Assign initial-stage clusters to nerves by mask evidence.

    A cluster gets nerve ``n`` when at least ``theta`` of its members
    thread every one of n's inclusion masks and no member majority
    crosses any of n's avoidance masks.  A cluster qualifying for
    several nerves is flagged ``ambiguous`` and left unassigned for
    manual resolution; one qualifying for none is rejected.
    """
    if a.stage is not AtlasStage.INITIAL:
        raise InvalidConfigError("screening applies to the initial-stage atlas")
    if not 0.0 < theta <= 1.0:
        raise InvalidConfigError("theta must lie in (0, 1]")
    roas = dict(roas) if roas else {}
    include: dict[Nerve, np.ndarray] = {}
    avoid: dict[Nerve, np.ndarray] = {}
    for nerve in Nerve:  # fixed nerve order keeps the scan deterministic
        masks = list(rois.get(nerve, ()))
        if masks:
            hits = [tractogram_mask_hits(a.fibers, m) for m in masks]
            include[nerve] = np.logical_and.reduce(hits)
        blocks = list(roas.get(nerve, ()))
        if blocks:
            hits = [tractogram_mask_hits(a.fibers, m) for m in blocks]
            avoid[nerve] = np.logical_or.reduce(hits)
    out = []
    for c in a.clusters:
        flags = tuple(f for f in c.flags if f != "ambiguous")
        if not c.member_rows:
            out.append(replace(c, screened_nerve=None, label=ClusterLabel.REJECTED, flags=flags))
            continue
        rows = np.asarray(c.member_rows, dtype=np.int64)
        qualified = []
        for nerve, passed in include.items():
            if passed[rows].mean() < theta:
                continue
            if nerve in avoid and avoid[nerve][rows].mean() > 0.5:
                continue
            qualified.append(nerve)
        if len(qualified) == 1:
            out.append(
                replace(c, screened_nerve=qualified[0], label=ClusterLabel.UNLABELED, flags=flags)
            )
        elif qualified:
            out.append(
                replace(
                    c,
                    screened_nerve=None,
                    label=ClusterLabel.UNLABELED,
                    flags=flags + ("ambiguous",),
                )
            )
        else:
            out.append(replace(c, screened_nerve=None, label=ClusterLabel.REJECTED, flags=flags))
    return replace(a, clusters=tuple(out))


def build_stage2(a: Atlas, cfg2: AtlasStageConfig) -> Atlas:
    """Merge screened members and re-cluster them at a finer grain.

    ``cfg2.sample_per_subject`` caps the merged pool as a total budget.
    The cluster count is capped by the pool size instead of raising, so
    screening that passes only a handful of clusters still builds.
    """
    if a.stage is not AtlasStage.INITIAL:
        raise InvalidConfigError("stage 2 builds from an initial-stage atlas")
    picked = [c for c in a.clusters if c.screened_nerve is not None and c.member_rows]
    if not picked:
        raise EmptyInputError("screening passed no clusters to merge")
    merged: list[tuple[int, str, int]] = []
    for c in picked:
        merged.extend(zip(c.member_rows, c.member_subjects, c.member_source_ids))
    merged.sort(key=lambda item: item[0])
    if len(merged) > cfg2.sample_per_subject:
        rng = np.random.default_rng(cfg2.seed)
        pick = np.sort(rng.choice(len(merged), size=cfg2.sample_per_subject, replace=False))
        merged = [merged[i] for i in pick]
    fibers = tuple(
        Streamline(a.fibers[row].points, id=i) for i, (row, _, _) in enumerate(merged)
    )
    pooled = Tractogram(fibers, space=Space.ATLAS)
    names = [subj for _, subj, _ in merged]
    source_ids = [sid for _, _, sid in merged]
    emb, clusters = _embed_and_cluster(pooled, names, source_ids, cfg2, min(cfg2.k, len(pooled)))
    return Atlas(
        stage=AtlasStage.ENHANCED,
        fibers=pooled,
        embedding=emb,
        clusters=clusters,
        stage1_config=a.stage1_config,
        stage2_config=cfg2,
        tracking_presets=a.tracking_presets,
        audit_log=a.audit_log,
        fiber_subjects=tuple(names),
        fiber_source_ids=tuple(source_ids),
    )


# ---------------------------------------------------------------------------
# labeling and reports


def apply_label(
    a: Atlas,
    cluster_id: int,
    label: ClusterLabel | str,
    rater: str,
    timestamp: str | None = None,
) -> Atlas:
    """Record one expert decision, returning a new atlas.

    Relabeling is allowed; the audit log keeps the full history and the
    cluster carries the latest label.  Without an explicit ``timestamp``
    the current UTC time is stamped.
    """
    label = label if isinstance(label, ClusterLabel) else ClusterLabel(label)
    if not isinstance(rater, str) or not rater:
        raise InvalidConfigError("rater must be a non-empty string")
    cluster_id = int(cluster_id)
    found = False
    clusters = []
    for c in a.clusters:
        if c.cluster_id == cluster_id:
            clusters.append(replace(c, label=label))
            found = True
        else:
            clusters.append(c)
    if not found:
        raise ClusterNotFoundError(f"no cluster with id {cluster_id}")
    stamp = timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
    event = LabelEvent(cluster_id, label, rater, stamp)
    return replace(a, clusters=tuple(clusters), audit_log=a.audit_log + (event,))


def label_counts(a: Atlas) -> dict[ClusterLabel, int]:
    """Cluster tally per label value, zeros included."""
    counts = {label: 0 for label in ClusterLabel}
    for c in a.clusters:
        counts[c.label] += 1
    return counts


def labeled_nerve_counts(a: Atlas) -> dict[Nerve, int]:
    """Expert-labeled cluster tally per nerve, zeros included."""
    counts = {nerve: 0 for nerve in Nerve}
    for c in a.clusters:
        nerve = NERVE_FOR_LABEL.get(c.label)
        if nerve is not None:
            counts[nerve] += 1
    return counts


def screened_nerve_counts(a: Atlas) -> dict[Nerve, int]:
    """Mask-screening assignment tally per nerve, zeros included."""
    counts = {nerve: 0 for nerve in Nerve}
    for c in a.clusters:
        if c.screened_nerve is not None:
            counts[c.screened_nerve] += 1
    return counts


def format_nerve_counts(counts: Mapping[Nerve, int]) -> str:
    """Render per-nerve tallies as a prose list, omitting zero entries."""
    parts = [
        f"{NERVE_DISPLAY[nerve]} ({counts[nerve]} clusters)"
        for nerve in Nerve
        if counts.get(nerve, 0)
    ]
    if not parts:
        return "no clusters"
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def screening_report(a: Atlas) -> str:
    return format_nerve_counts(screened_nerve_counts(a))


def label_report(a: Atlas) -> str:
    return format_nerve_counts(labeled_nerve_counts(a))
