"""Evaluation harness: visitation maps, weighted overlap, and rate tables.

Bundles are compared volumetrically: each is rasterized onto a shared
voxel grid into a per-voxel fiber visitation count, and the weighted
Dice score measures how much visitation weight the two bundles place on
their common support.  The module also emulates manual ROI-based fiber
selection (the ground-truth arm of the evaluation) and renders the
identification-rate and overlap tables as text and CSV.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .apply import CN_LABELS, IdentificationResult
from .core import (
    AffineTransform,
    MaskVolume,
    Nerve,
    Tractogram,
    _dense_sample,
    tractogram_mask_hits,
)
from .errors import (
    ArityError,
    EmptyInputError,
    GridMismatchError,
    InvalidConfigError,
    InvalidGeometryError,
)
from .pipeline import NERVE_DISPLAY, NERVE_FOR_LABEL, ClusterLabel

# Isotropic default matching the acquisition resolution of the source data.
DEFAULT_VOXEL_MM = 1.25

LABEL_DISPLAY = {
    ClusterLabel.CN_II_D: "CN II-D",
    ClusterLabel.CN_II_N: "CN II-N",
    ClusterLabel.CN_III_L: "CN III-L",
    ClusterLabel.CN_III_R: "CN III-R",
    ClusterLabel.CN_V_L: "CN V-L",
    ClusterLabel.CN_V_R: "CN V-R",
    ClusterLabel.CN_VII_VIII_L: "CN VII/VIII-L",
    ClusterLabel.CN_VII_VIII_R: "CN VII/VIII-R",
}

_STRATA = ("successful", "unsuccessful")


@dataclass(frozen=True, eq=False)
class GridSpec:
    """A voxel lattice: integer dims plus a voxel-to-world affine."""

    dims: tuple[int, int, int]
    voxel_to_world: AffineTransform

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise InvalidGeometryError(f"grid dims must be three positive ints, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        if not isinstance(self.voxel_to_world, AffineTransform):
            object.__setattr__(self, "voxel_to_world", AffineTransform(self.voxel_to_world))

    @classmethod
    def from_mask(cls, m: MaskVolume) -> "GridSpec":
        return cls(m.dims, m.voxel_to_world)

    @classmethod
    def covering(
        cls,
        tracts: Iterable[Tractogram],
        voxel_mm: float = DEFAULT_VOXEL_MM,
        pad_mm: float = 2.5,
    ) -> "GridSpec":
        """Axis-aligned isotropic grid containing every fiber point."""
        if voxel_mm <= 0:
            raise InvalidConfigError("voxel size must be positive")
        if pad_mm < 0:
            raise InvalidConfigError("padding must be non-negative")
        points = [s.points for t in tracts for s in t]
        if not points:
            raise EmptyInputError("no fibers to build a grid around")
        stacked = np.concatenate(points, axis=0)
        lo = stacked.min(axis=0) - pad_mm
        hi = stacked.max(axis=0) + pad_mm
        dims = np.maximum(np.ceil((hi - lo) / voxel_mm).astype(int), 1)
        affine = AffineTransform.from_parts(np.eye(3) * voxel_mm, lo)
        return cls(tuple(dims), affine)

    @property
    def voxel_edges_mm(self) -> np.ndarray:
        return np.linalg.norm(self.voxel_to_world.linear, axis=0)

    def matches(self, other: "GridSpec") -> bool:
        return self.dims == other.dims and np.array_equal(
            self.voxel_to_world.matrix, other.voxel_to_world.matrix
        )


@dataclass(frozen=True, eq=False)
class VisitationMap:
    """Per-voxel count of distinct streamlines touching each voxel."""

    grid: GridSpec
    counts: np.ndarray

    def __post_init__(self) -> None:
        c = np.ascontiguousarray(np.asarray(self.counts, dtype=np.int64))
        if c.shape != self.grid.dims:
            raise GridMismatchError(f"counts shape {c.shape} does not match grid {self.grid.dims}")
        if (c < 0).any():
            raise InvalidConfigError("visitation counts must be non-negative")
        c.flags.writeable = False
        object.__setattr__(self, "counts", c)

    @property
    def weights(self) -> np.ndarray:
        """Counts normalized to total visitation; all zero for an empty map."""
        total = int(self.counts.sum())
        if total == 0:
            return np.zeros(self.grid.dims)
        return self.counts / total


def voxelize_bundle(b: Tractogram, grid: GridSpec | MaskVolume) -> VisitationMap:
    """Rasterize a bundle: each fiber marks every voxel it passes, once.

    Fibers are resampled at half the smallest voxel edge so a fiber
    cannot step over a voxel it crosses; an empty bundle yields a valid
    all-zero map.
    """
    if isinstance(grid, MaskVolume):
        grid = GridSpec.from_mask(grid)
    step = float(grid.voxel_edges_mm.min()) / 2.0
    if step <= 0:
        raise InvalidConfigError("grid voxels must have positive extent")
    dims = np.array(grid.dims)
    inverse = grid.voxel_to_world.inverse()
    counts = np.zeros(grid.dims, dtype=np.int64)
    for s in b:
        vox = np.floor(inverse.apply(_dense_sample(s.points, step))).astype(np.int64)
        vox = vox[np.all((vox >= 0) & (vox < dims), axis=1)]
        if len(vox) == 0:
            continue
        vox = np.unique(vox, axis=0)
        counts[vox[:, 0], vox[:, 1], vox[:, 2]] += 1
    return VisitationMap(grid=grid, counts=counts)


def wdice(m1: VisitationMap, m2: VisitationMap) -> float:
    """Weighted Dice overlap: shared-support weight over total weight.

    With uniform weights this reduces to plain Dice, and it is 1 exactly
    when the two supports coincide (per-voxel weights then cancel).  Two
    empty maps have identical (empty) supports and score 1.
    """
    if not m1.grid.matches(m2.grid):
        raise GridMismatchError("visitation maps live on different grids")
    s1 = m1.counts > 0
    s2 = m2.counts > 0
    w1 = m1.weights
    w2 = m2.weights
    denom = w1[s1].sum() + w2[s2].sum()
    if denom == 0:
        return 1.0
    both = s1 & s2
    return float((w1[both].sum() + w2[both].sum()) / denom)


def select_ground_truth(
    t: Tractogram,
    rois: Sequence[MaskVolume],
    roas: Sequence[MaskVolume] = (),
) -> Tractogram:
    """Manual-selection emulation: through every ROI, through no ROA."""
    if not rois:
        raise InvalidConfigError("ground-truth selection needs at least one ROI")
    keep = np.ones(len(t), dtype=bool)
    for roi in rois:
        keep &= tractogram_mask_hits(t, roi)
    for roa in roas:
        keep &= ~tractogram_mask_hits(t, roa)
    return t.with_streamlines([s for s, k in zip(t, keep) if k])


def _fraction(k: int, n: int) -> str:
    return f"{k}/{n}"


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass(frozen=True, eq=False)
class IdentificationReport:
    """Identification tallies per subdivision, plus overlap statistics.

    ``strata[label][stratum]`` is ``(auto_identified, total)`` within the
    manually successful / unsuccessful subject groups.  Overlap entries
    are ``(mean, population std, n)`` per nerve, with the pooled entry
    under ``overall``.
    """

    strata: dict[ClusterLabel, dict[str, tuple[int, int]]]
    wdice_by_nerve: dict[Nerve, tuple[float, float, int]] | None
    wdice_overall: tuple[float, float, int] | None

    def to_text(self) -> str:
        lines = ["CN identification by subdivision"]
        header = f"{'subdivision':<15}{'auto (manual ok)':>18}{'manual':>8}{'auto (manual failed)':>22}{'manual':>8}"
        lines.append(header)
        for label in CN_LABELS:
            good = self.strata[label]["successful"]
            bad = self.strata[label]["unsuccessful"]
            lines.append(
                f"{LABEL_DISPLAY[label]:<15}"
                f"{_fraction(good[0], good[1]):>18}"
                f"{_fraction(good[1], good[1]):>8}"
                f"{_fraction(bad[0], bad[1]):>22}"
                f"{_fraction(0, bad[1]):>8}"
            )
        if self.wdice_by_nerve is not None:
            lines.append("")
            lines.append("spatial overlap (wDice, mean±std)")
            for nerve in Nerve:
                if nerve not in self.wdice_by_nerve:
                    continue
                mean, std, n = self.wdice_by_nerve[nerve]
                lines.append(f"{NERVE_DISPLAY[nerve]:<15}{mean:.4f}±{std:.4f}  (n={n})")
            if self.wdice_overall is not None:
                mean, std, n = self.wdice_overall
                lines.append(f"{'all CNs':<15}{mean:.4f}±{std:.4f}  (n={n})")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        rows = ["table,label,stratum,auto,manual,total,mean,std,n"]
        for label in CN_LABELS:
            for stratum in _STRATA:
                auto, total = self.strata[label][stratum]
                manual = total if stratum == "successful" else 0
                rows.append(
                    f"identification,{LABEL_DISPLAY[label]},{stratum},{auto},{manual},{total},,,"
                )
        if self.wdice_by_nerve is not None:
            for nerve in Nerve:
                if nerve not in self.wdice_by_nerve:
                    continue
                mean, std, n = self.wdice_by_nerve[nerve]
                rows.append(f"wdice,{NERVE_DISPLAY[nerve]},,,,,{mean:.4f},{std:.4f},{n}")
            if self.wdice_overall is not None:
                mean, std, n = self.wdice_overall
                rows.append(f"wdice,all CNs,,,,,{mean:.4f},{std:.4f},{n}")
        return "\n".join(rows) + "\n"


def identification_table(
    results: Sequence[IdentificationResult],
    truth: Sequence[Mapping[ClusterLabel, bool]],
    wdice_scores: Sequence[Mapping[ClusterLabel, float]] | None = None,
    wdice_stratum: str = "successful",
) -> IdentificationReport:
    """Tally automated identification against manual ground truth.

    ``truth[i][label]`` says whether manual selection identified that
    subdivision for subject ``i``; missing labels count as failures.
    Overlap scores are aggregated per nerve and pooled overall, by
    default only where manual selection succeeded (``wdice_stratum`` of
    ``"all"`` keeps every provided score).
    """
    if len(results) != len(truth):
        raise ArityError(f"{len(results)} results but {len(truth)} truth entries")
    if wdice_scores is not None and len(wdice_scores) != len(results):
        raise ArityError(f"{len(results)} results but {len(wdice_scores)} score entries")
    if wdice_stratum not in ("successful", "all"):
        raise InvalidConfigError(f"unknown wdice stratum {wdice_stratum!r}")

    strata = {
        label: {stratum: [0, 0] for stratum in _STRATA} for label in CN_LABELS
    }
    for res, manual in zip(results, truth):
        for label in CN_LABELS:
            stratum = "successful" if manual.get(label, False) else "unsuccessful"
            strata[label][stratum][1] += 1
            if res.identified[label]:
                strata[label][stratum][0] += 1
    tallies = {
        label: {stratum: tuple(strata[label][stratum]) for stratum in _STRATA}
        for label in CN_LABELS
    }

    by_nerve = None
    overall = None
    if wdice_scores is not None:
        pooled: dict[Nerve, list[float]] = {nerve: [] for nerve in Nerve}
        everything: list[float] = []
        for manual, scores in zip(truth, wdice_scores):
            for label, value in scores.items():
                label = ClusterLabel(label)
                if label not in NERVE_FOR_LABEL:
                    raise InvalidConfigError(f"overlap score for non-nerve label {label.value!r}")
                if wdice_stratum == "successful" and not manual.get(label, False):
                    continue
                pooled[NERVE_FOR_LABEL[label]].append(float(value))
                everything.append(float(value))
        by_nerve = {}
        for nerve, values in pooled.items():
            if values:
                mean, std = _mean_std(values)
                by_nerve[nerve] = (mean, std, len(values))
        if everything:
            mean, std = _mean_std(everything)
            overall = (mean, std, len(everything))
    return IdentificationReport(
        strata=tallies, wdice_by_nerve=by_nerve, wdice_overall=overall
    )
