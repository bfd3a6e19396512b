"""Geometric primitives for streamline tractography.

Conventions used throughout the package:

* Points live in millimetres, scanner RAS, as float64 arrays of shape
  ``(n, 3)``.  A single point is a length-3 vector.
* A streamline is an ordered polyline of at least two points.  Neither
  orientation (head vs tail) nor point count is meaningful on its own;
  distances below account for that.
* Arrays stored on frozen dataclasses are made non-writeable so shared
  instances can be handed to worker threads without copying.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DegenerateFiberError,
    InvalidConfigError,
    InvalidGeometryError,
    PointCountMismatchError,
    SingularTransformError,
)

# Streamlines shorter than this (total arc length, mm) carry no usable
# geometry and are dropped when files are read.
DEGENERATE_LENGTH_MM = 1e-3

# Default number of points fibers are resampled to before any distance
# computation.
DEFAULT_POINTS_PER_FIBER = 15


class Space(Enum):
    """Coordinate frame a tractogram currently lives in."""

    SUBJECT = "subject"
    ATLAS = "atlas"


class DistanceKind(Enum):
    """Fiber-to-fiber distance flavours."""

    POINTWISE_MEAN = "pointwise_mean"
    MEAN_CLOSEST = "mean_closest"


def _coerce_distance_kind(kind: DistanceKind | str) -> DistanceKind:
    if isinstance(kind, DistanceKind):
        return kind
    try:
        return DistanceKind(kind)
    except ValueError:
        raise InvalidConfigError(f"unknown distance kind: {kind!r}") from None


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    out.flags.writeable = False
    return out


def as_point_array(points: object, *, min_points: int = 1) -> np.ndarray:
    """Validate and normalise an ``(n, 3)`` float64 point array.

    Raises
    ------
    InvalidGeometryError
        If the shape is wrong, any coordinate is non-finite, or fewer than
        ``min_points`` points are present.
    """
    a = np.asarray(points, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise InvalidGeometryError(f"expected (n, 3) point array, got shape {a.shape}")
    if a.shape[0] < min_points:
        raise InvalidGeometryError(f"need at least {min_points} points, got {a.shape[0]}")
    if not np.isfinite(a).all():
        raise InvalidGeometryError("points contain non-finite coordinates")
    return a


@dataclass(frozen=True, eq=False)
class Streamline:
    """An ordered polyline in world coordinates with a stable identifier.

    ``points`` is an ``(n, 3)`` float64 array, n >= 2.  Consecutive
    duplicate points are permitted (they contribute zero length); fibers
    below :data:`DEGENERATE_LENGTH_MM` total length are still representable
    here, file readers reject them at ingest instead.
    """

    points: np.ndarray
    id: int = 0

    def __post_init__(self) -> None:
        pts = as_point_array(self.points, min_points=2)
        object.__setattr__(self, "points", _freeze(pts))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class Tractogram:
    """A collection of streamlines from one subject (or one pooled set).

    Streamline ids must be unique within one tractogram.  ``space`` records
    the coordinate frame; transforming does not reorder or renumber fibers.
    """

    streamlines: tuple[Streamline, ...]
    subject_id: str = ""
    space: Space = Space.SUBJECT

    def __post_init__(self) -> None:
        object.__setattr__(self, "streamlines", tuple(self.streamlines))
        ids = [s.id for s in self.streamlines]
        if len(set(ids)) != len(ids):
            raise InvalidGeometryError(
                f"duplicate streamline ids in tractogram {self.subject_id!r}"
            )

    def __len__(self) -> int:
        return len(self.streamlines)

    def __iter__(self) -> Iterator[Streamline]:
        return iter(self.streamlines)

    def __getitem__(self, index: int) -> Streamline:
        return self.streamlines[index]

    @property
    def ids(self) -> np.ndarray:
        return np.array([s.id for s in self.streamlines], dtype=np.int64)

    def with_streamlines(self, streamlines: Iterable[Streamline]) -> "Tractogram":
        return Tractogram(tuple(streamlines), subject_id=self.subject_id, space=self.space)


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Affine map ``x -> L @ x + t`` stored as a 3x4 matrix ``[L | t]``.

    The linear part must be invertible (|det| > 1e-8); a singular map would
    collapse fibers and silently break every distance downstream.
    """

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 4):
            raise InvalidGeometryError(f"affine matrix must be 3x4, got {m.shape}")
        if not np.isfinite(m).all():
            raise InvalidGeometryError("affine matrix contains non-finite entries")
        if abs(np.linalg.det(m[:, :3])) <= 1e-8:
            raise SingularTransformError("linear part of affine is singular")
        object.__setattr__(self, "matrix", _freeze(m))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]))

    @classmethod
    def from_parts(cls, linear: np.ndarray, translation: np.ndarray) -> "AffineTransform":
        linear = np.asarray(linear, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(translation, dtype=np.float64).reshape(3, 1)
        return cls(np.hstack([linear, translation]))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 3]

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to an ``(n, 3)`` point array (or a single length-3 point)."""
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        if single:
            pts = pts[None, :]
        out = pts @ self.linear.T + self.translation
        return out[0] if single else out

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """Return the transform equal to applying ``other`` first, then self."""
        lin = self.linear @ other.linear
        tr = self.linear @ other.translation + self.translation
        return AffineTransform.from_parts(lin, tr)

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.linear)
        return AffineTransform.from_parts(inv, -inv @ self.translation)


@dataclass(frozen=True, eq=False)
class MaskVolume:
    """Binary volume with a voxel-to-world affine.

    ``data`` is indexed ``[i, j, k]``; voxel ``(i, j, k)`` occupies the world
    region mapped from the half-open cube ``[i, i+1) x [j, j+1) x [k, k+1)``,
    i.e. the affine maps voxel-corner coordinates.  A world point is inside
    voxel ``floor(world_to_voxel(p))``.
    """

    data: np.ndarray
    voxel_to_world: AffineTransform

    def __post_init__(self) -> None:
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise InvalidGeometryError(f"mask data must be 3-D, got shape {d.shape}")
        d = np.ascontiguousarray(d != 0)
        d.flags.writeable = False
        object.__setattr__(self, "data", d)
        if not isinstance(self.voxel_to_world, AffineTransform):
            object.__setattr__(self, "voxel_to_world", AffineTransform(self.voxel_to_world))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def voxel_edges_mm(self) -> np.ndarray:
        """Euclidean lengths of the three voxel edge vectors."""
        return np.linalg.norm(self.voxel_to_world.linear, axis=0)

    def world_to_voxel(self, points: np.ndarray) -> np.ndarray:
        return self.voxel_to_world.inverse().apply(points)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Per-point occupancy test; points outside the grid are False."""
        vox = np.floor(self.world_to_voxel(np.atleast_2d(points))).astype(np.int64)
        dims = np.array(self.dims)
        inside = np.all((vox >= 0) & (vox < dims), axis=1)
        out = np.zeros(len(vox), dtype=bool)
        if inside.any():
            idx = vox[inside]
            out[inside] = self.data[idx[:, 0], idx[:, 1], idx[:, 2]]
        return out


class Nerve(Enum):
    """Cranial nerves covered by the tracking presets."""

    CN_II = "CN_II"
    CN_III = "CN_III"
    CN_V = "CN_V"
    CN_VII_VIII = "CN_VII_VIII"


@dataclass(frozen=True)
class TrackingPreset:
    """Per-nerve tractography parameters for the unscented Kalman tracker.

    ``qm`` and ``ql`` are the process-noise settings for orientation and
    diffusivity; FA thresholds gate seeding and stopping.
    """

    nerve: Nerve
    seeding_fa: float
    stopping_fa: float
    qm: float
    ql: float
    seeds_per_voxel: int = 6

    def __post_init__(self) -> None:
        if not (0.0 < self.seeding_fa < 1.0 and 0.0 < self.stopping_fa < 1.0):
            raise InvalidConfigError("FA thresholds must lie strictly between 0 and 1")
        if self.qm <= 0.0 or self.ql <= 0.0:
            raise InvalidConfigError("process noise parameters must be positive")
        if self.seeds_per_voxel < 1:
            raise InvalidConfigError("seeds_per_voxel must be at least 1")


DEFAULT_TRACKING_PRESETS: tuple[TrackingPreset, ...] = (
    TrackingPreset(Nerve.CN_II, seeding_fa=0.02, stopping_fa=0.01, qm=0.001, ql=50.0),
    TrackingPreset(Nerve.CN_III, seeding_fa=0.01, stopping_fa=0.01, qm=0.001, ql=150.0),
    TrackingPreset(Nerve.CN_V, seeding_fa=0.06, stopping_fa=0.05, qm=0.001, ql=300.0),
    TrackingPreset(Nerve.CN_VII_VIII, seeding_fa=0.02, stopping_fa=0.05, qm=0.001, ql=50.0),
)


# ---------------------------------------------------------------------------
# Streamline operations


def _segment_lengths(points: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(points, axis=0), axis=1)


def streamline_length(s: Streamline) -> float:
    """Total arc length in mm (sum of segment lengths)."""
    return float(_segment_lengths(s.points).sum())


def resample_polyline(points: np.ndarray, p: int) -> np.ndarray:
    """Resample a polyline to ``p`` points equally spaced in arc length.

    End points are preserved exactly.  Raises
    :class:`DegenerateFiberError` when the polyline is too short
    (< :data:`DEGENERATE_LENGTH_MM`) to define an arc-length parameter.
    """
    if p < 2:
        raise InvalidConfigError(f"resample target must be >= 2 points, got {p}")
    pts = as_point_array(points, min_points=2)
    cum = np.concatenate([[0.0], np.cumsum(_segment_lengths(pts))])
    total = cum[-1]
    if total < DEGENERATE_LENGTH_MM:
        raise DegenerateFiberError(f"polyline length {total:g} mm below resampling minimum")
    targets = np.linspace(0.0, total, p)
    out = np.empty((p, 3), dtype=np.float64)
    for k in range(3):
        out[:, k] = np.interp(targets, cum, pts[:, k])
    # Guard the ends against interpolation rounding.
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


def resample_streamline(s: Streamline, p: int) -> Streamline:
    """Arc-length resample to exactly ``p`` points, keeping the id."""
    return Streamline(resample_polyline(s.points, p), id=s.id)


def filter_by_length(t: Tractogram, min_length_mm: float) -> Tractogram:
    """Keep streamlines with arc length >= ``min_length_mm``; order intact."""
    if min_length_mm < 0:
        raise InvalidConfigError("minimum length must be non-negative")
    kept = tuple(s for s in t if streamline_length(s) >= min_length_mm)
    return t.with_streamlines(kept)


def fiber_distance(
    a: Streamline | np.ndarray,
    b: Streamline | np.ndarray,
    kind: DistanceKind | str = DistanceKind.POINTWISE_MEAN,
) -> float:
    """Distance in mm between two fibers, insensitive to head/tail order.

    ``pointwise_mean`` pairs corresponding points (requires equal counts)
    and takes the better of the two orientations.  ``mean_closest``
    averages the two directed mean closest-point distances and needs no
    point correspondence at all.
    """
    kind = _coerce_distance_kind(kind)
    pa = a.points if isinstance(a, Streamline) else as_point_array(a, min_points=2)
    pb = b.points if isinstance(b, Streamline) else as_point_array(b, min_points=2)
    if kind is DistanceKind.POINTWISE_MEAN:
        if pa.shape[0] != pb.shape[0]:
            raise PointCountMismatchError(
                f"pointwise distance needs equal point counts, got {pa.shape[0]} and {pb.shape[0]}"
            )
        fwd = np.linalg.norm(pa - pb, axis=1).mean()
        rev = np.linalg.norm(pa - pb[::-1], axis=1).mean()
        return float(min(fwd, rev))
    # mean_closest: symmetric average of directed mean closest-point distances.
    cross = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    return float(0.5 * (cross.min(axis=1).mean() + cross.min(axis=0).mean()))


def stack_resampled(t: Tractogram | Sequence[Streamline], p: int) -> np.ndarray:
    """Resample every fiber to ``p`` points and stack into ``(n, p, 3)``."""
    fibers = list(t)
    out = np.empty((len(fibers), p, 3), dtype=np.float64)
    for i, s in enumerate(fibers):
        out[i] = resample_polyline(s.points, p)
    return out


def pairwise_fiber_distances(
    a: np.ndarray,
    b: np.ndarray | None = None,
    kind: DistanceKind | str = DistanceKind.POINTWISE_MEAN,
    chunk_rows: int = 0,
) -> np.ndarray:
    """All-pairs fiber distances between stacks of resampled fibers.

    ``a`` and ``b`` are ``(n, p, 3)`` stacks (``b`` defaults to ``a``).
    Computation is chunked along the first axis to bound peak memory;
    ``chunk_rows`` of 0 picks a size that keeps the scratch block near 64 MB.
    """
    kind = _coerce_distance_kind(kind)
    a = np.asarray(a, dtype=np.float64)
    b = a if b is None else np.asarray(b, dtype=np.float64)
    if a.ndim != 3 or b.ndim != 3 or a.shape[2] != 3 or b.shape[2] != 3:
        raise InvalidGeometryError("expected (n, p, 3) fiber stacks")
    n, p = a.shape[0], a.shape[1]
    m = b.shape[0]
    if kind is DistanceKind.POINTWISE_MEAN and p != b.shape[1]:
        raise PointCountMismatchError("stacks have different points per fiber")
    if chunk_rows <= 0:
        budget = 64 * 1024 * 1024
        per_row = max(1, m * max(p, b.shape[1]) * 3 * 8)
        chunk_rows = max(1, min(n, budget // per_row))
    out = np.empty((n, m), dtype=np.float64)
    if kind is DistanceKind.POINTWISE_MEAN:
        b_rev = b[:, ::-1, :]
        for lo in range(0, n, chunk_rows):
            hi = min(n, lo + chunk_rows)
            block = a[lo:hi, None, :, :]
            fwd = np.linalg.norm(block - b[None], axis=3).mean(axis=2)
            rev = np.linalg.norm(block - b_rev[None], axis=3).mean(axis=2)
            out[lo:hi] = np.minimum(fwd, rev)
        return out
    for lo in range(0, n, chunk_rows):
        hi = min(n, lo + chunk_rows)
        # (rows, m, pa, pb) point cross-distance block
        diff = a[lo:hi, None, :, None, :] - b[None, :, None, :, :]
        cross = np.linalg.norm(diff, axis=4)
        out[lo:hi] = 0.5 * (cross.min(axis=3).mean(axis=2) + cross.min(axis=2).mean(axis=2))
    return out


def transform_tractogram(
    t: Tractogram, x: AffineTransform, space: Space | None = None
) -> Tractogram:
    """Apply an affine to every streamline; ids and order are untouched."""
    moved = tuple(Streamline(x.apply(s.points), id=s.id) for s in t)
    out = Tractogram(moved, subject_id=t.subject_id, space=space if space is not None else t.space)
    return out


def sample_tractogram(t: Tractogram, n: int, seed: int) -> Tractogram:
    """Uniform sample of ``min(n, len(t))`` fibers without replacement.

    Deterministic for a fixed seed; the result is ordered by streamline id
    so downstream processing never depends on incidental file order.
    """
    if n < 0:
        raise InvalidConfigError("sample size must be non-negative")
    fibers = list(t)
    if n < len(fibers):
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(fibers), size=n, replace=False)
        fibers = [fibers[i] for i in idx]
    fibers.sort(key=lambda s: s.id)
    return t.with_streamlines(fibers)


def _dense_sample(points: np.ndarray, step_mm: float) -> np.ndarray:
    total = float(_segment_lengths(points).sum())
    if total < DEGENERATE_LENGTH_MM:
        return points
    count = max(2, int(np.ceil(total / step_mm)) + 1)
    return resample_polyline(points, count)


def mask_step_mm(m: MaskVolume) -> float:
    """Default sampling step for mask tests: half the smallest voxel edge."""
    return float(m.voxel_edges_mm.min()) / 2.0


def streamline_passes_mask(s: Streamline, m: MaskVolume, step_mm: float | None = None) -> bool:
    """True when the densely sampled fiber touches any occupied voxel.

    The fiber is resampled at spacing <= ``step_mm`` (default half the
    smallest voxel edge) so thin masks cannot slip between vertices.
    """
    if step_mm is None:
        step_mm = mask_step_mm(m)
    if step_mm <= 0:
        raise InvalidConfigError("sampling step must be positive")
    return bool(m.contains(_dense_sample(s.points, step_mm)).any())


def tractogram_mask_hits(
    t: Tractogram | Sequence[Streamline], m: MaskVolume, step_mm: float | None = None
) -> np.ndarray:
    """Vectorised :func:`streamline_passes_mask` over a whole tractogram."""
    if step_mm is None:
        step_mm = mask_step_mm(m)
    if step_mm <= 0:
        raise InvalidConfigError("sampling step must be positive")
    fibers = list(t)
    if not fibers:
        return np.zeros(0, dtype=bool)
    sampled = [_dense_sample(s.points, step_mm) for s in fibers]
    counts = np.array([len(p) for p in sampled])
    hits = m.contains(np.concatenate(sampled, axis=0))
    out = np.zeros(len(fibers), dtype=bool)
    stop = np.cumsum(counts)
    start = stop - counts
    for i in range(len(fibers)):
        out[i] = hits[start[i] : stop[i]].any()
    return out
