"""Spectral embedding and clustering of streamlines.

The embedding is the normalized-cuts construction: Gaussian affinities
over fiber distances, symmetric degree normalization, eigenvectors scaled
by their eigenvalues and unit-normalized per fiber.  Large inputs go
through a landmark (Nystrom) factorization that also provides the
out-of-sample extension used when applying an atlas to new subjects.

Everything here is deterministic for a fixed seed: landmark choice, ties,
and eigenvector signs are all pinned.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import (
    DEFAULT_POINTS_PER_FIBER,
    DistanceKind,
    Tractogram,
    pairwise_fiber_distances,
    stack_resampled,
)
from .errors import InvalidConfigError, InvalidKError, NumericalFailureError

# Eigenvalues at or below this are treated as numerically zero rank.
_EIGENVALUE_FLOOR = 1e-12
# Kernel rows with no entry above this are flagged low-confidence.
LOW_CONFIDENCE_KERNEL = 1e-6

EXACT_SIZE_GUARD = 5000


@dataclass(frozen=True)
class AffinityParams:
    """Gaussian kernel parameters over fiber distances."""

    sigma_mm: float = 30.0
    kind: DistanceKind = DistanceKind.POINTWISE_MEAN
    points_per_fiber: int = DEFAULT_POINTS_PER_FIBER

    def __post_init__(self) -> None:
        if self.sigma_mm <= 0:
            raise InvalidConfigError("kernel width sigma must be positive")
        if self.points_per_fiber < 2:
            raise InvalidConfigError("points_per_fiber must be at least 2")
        if not isinstance(self.kind, DistanceKind):
            object.__setattr__(self, "kind", DistanceKind(self.kind))


def affinity(d, params: AffinityParams):
    """Gaussian affinity exp(-(d/sigma)^2); 1 at zero distance."""
    d = np.asarray(d, dtype=np.float64)
    out = np.exp(-((d / params.sigma_mm) ** 2))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class SpectralEmbedding:
    """Per-fiber embedding coordinates plus the basis to embed newcomers.

    ``basis`` and ``degree_vector`` implement the extension: for a new
    fiber with kernel row k against ``landmarks``, its raw coordinates are
    ``(k / sqrt(k . degree_vector)) @ basis``; dropping the leading trivial
    component, scaling by the eigenvalues, and unit-normalizing yields
    coordinates commensurate with ``coords``.
    """

    landmarks: np.ndarray        # (m, p, 3) resampled landmark geometry
    landmark_ids: np.ndarray     # streamline ids of the landmarks
    eigenvalues: np.ndarray      # (t+1,) descending, leading trivial included
    basis: np.ndarray            # (m, t+1) extension projection
    degree_vector: np.ndarray    # (m,) degree estimator weights
    coords: np.ndarray           # (n, t) unit-normalized embedding rows
    params: AffinityParams
    truncated: bool = False      # true when rank collapse reduced t

    def __post_init__(self) -> None:
        ev = np.asarray(self.eigenvalues, dtype=np.float64)
        if ev.ndim != 1 or len(ev) < 2:
            raise InvalidConfigError("need at least the trivial plus one eigenvalue")
        if np.any(np.diff(ev) > 1e-9):
            raise InvalidConfigError("eigenvalues must be sorted descending")

    @property
    def dim(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True, eq=False)
class EmbeddedFibers:
    """Extension output: coordinates plus a low-confidence flag per fiber."""

    coords: np.ndarray
    low_confidence: np.ndarray


@dataclass(frozen=True, eq=False)
class ClusteringResult:
    """K-means output over embedding rows."""

    k: int
    labels: np.ndarray     # (n,) cluster index per fiber
    centroids: np.ndarray  # (K, t) unit rows for non-empty clusters
    scores: np.ndarray     # (n,) mean dot product to other own-cluster members


def _canonicalize_signs(vectors: np.ndarray, *companions: np.ndarray) -> None:
    """Flip columns in place so the largest-magnitude component is positive.

    Keyed to the extreme component (not the first nonzero one) so the
    choice does not depend on fiber input order.  Companion matrices
    (sharing column meaning) are flipped consistently.
    """
    for j in range(vectors.shape[1]):
        col = vectors[:, j]
        if len(col) and col[int(np.argmax(np.abs(col)))] < 0:
            vectors[:, j] = -col
            for other in companions:
                other[:, j] = -other[:, j]


def _align_leading_group(w: np.ndarray, vecs: np.ndarray, trivial: np.ndarray) -> np.ndarray:
    """Pin the basis of a numerically degenerate leading eigenvalue group.

    When bundles are far apart relative to sigma the affinity graph is
    disconnected at float resolution and the top eigenvalue repeats; eigh
    then returns an arbitrary basis of that eigenspace, possibly missing
    the trivial direction entirely.  The trivial vector is analytically
    always a top eigenvector, so rotate the group to start with its
    projection; the complement then carries the component contrasts that
    the embedding relies on.
    """
    group = int(np.sum(w[0] - w < 1e-9))
    q = vecs[:, :group]
    proj = q @ (q.T @ trivial)
    nrm = np.linalg.norm(proj)
    if nrm < 1e-8:
        return vecs
    q1 = proj / nrm
    out = vecs.copy()
    out[:, 0] = q1
    if group > 1:
        resid = q - np.outer(q1, q1 @ q)
        u_r = np.linalg.svd(resid, full_matrices=False)[0]
        out[:, 1:group] = u_r[:, : group - 1]
    return out


def _normalize_rows(raw: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(raw, axis=1)
    safe = np.maximum(norms, 1e-300)
    return raw / safe[:, None]


def _truncate_rank(eigenvalues: np.ndarray, t: int) -> tuple[int, bool]:
    usable = int(np.sum(eigenvalues[: t + 1] > _EIGENVALUE_FLOOR))
    if usable < 2:
        raise NumericalFailureError("affinity spectrum collapsed below rank 2")
    if usable < t + 1:
        return usable - 1, True
    return t, False


def _raw_extension(
    kernel_rows: np.ndarray, emb: SpectralEmbedding, min_kernel: float = LOW_CONFIDENCE_KERNEL
) -> EmbeddedFibers:
    low = kernel_rows.max(axis=1) < min_kernel if kernel_rows.size else np.zeros(0, bool)
    degrees = kernel_rows @ emb.degree_vector
    degrees = np.maximum(degrees, 1e-300)
    v = (kernel_rows / np.sqrt(degrees)[:, None]) @ emb.basis
    raw = v[:, 1:] * emb.eigenvalues[1:]
    coords = _normalize_rows(raw)
    coords[low] = 0.0
    return EmbeddedFibers(coords=coords, low_confidence=low)


def exact_embed(
    fibers: Tractogram, params: AffinityParams, t: int = 10, size_guard: int = EXACT_SIZE_GUARD
) -> SpectralEmbedding:
    """Dense-eigendecomposition embedding for modest fiber counts.

    Mathematically closed-form (no landmark approximation); used as the
    reference the landmark path is validated against.
    """
    n = len(fibers)
    if n > size_guard:
        raise InvalidConfigError(f"{n} fibers exceeds the exact-embedding guard ({size_guard})")
    if t < 1:
        raise InvalidConfigError("embedding dimension must be at least 1")
    if t + 1 > n:
        raise InvalidConfigError(f"embedding dimension {t} too large for {n} fibers")
    stack = stack_resampled(fibers, params.points_per_fiber)
    kernel = affinity(pairwise_fiber_distances(stack, kind=params.kind), params)
    kernel = 0.5 * (kernel + kernel.T)
    degrees = kernel.sum(axis=1)
    inv_sqrt_d = 1.0 / np.sqrt(degrees)
    normalized = kernel * inv_sqrt_d[:, None] * inv_sqrt_d[None, :]
    normalized = 0.5 * (normalized + normalized.T)
    w, u = np.linalg.eigh(normalized)
    order = np.argsort(w)[::-1]
    w, u = w[order], u[:, order]
    u = _align_leading_group(w, u, np.sqrt(degrees))

    t_eff, truncated = _truncate_rank(w, t)
    eigenvalues = w[: t_eff + 1].copy()
    u_top = u[:, : t_eff + 1].copy()
    # extension projection: row-normalized kernel against all fibers,
    # divided through the spectrum
    basis = (u_top * inv_sqrt_d[:, None]) / eigenvalues[None, :]
    _canonicalize_signs(u_top, basis)

    raw = u_top[:, 1:] * eigenvalues[1:]
    coords = _normalize_rows(raw)
    return SpectralEmbedding(
        landmarks=stack,
        landmark_ids=np.array([s.id for s in fibers], dtype=np.int64),
        eigenvalues=eigenvalues,
        basis=basis,
        degree_vector=np.ones(n),
        coords=coords,
        params=params,
        truncated=truncated,
    )


def _floored_inverse_roots(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-inverse and inverse square root of a symmetric PSD matrix.

    Eigenvalues below the floor are dropped (pseudo-inverse style), which
    keeps near-duplicate landmarks from blowing up the factorization.
    """
    w, q = np.linalg.eigh(0.5 * (a + a.T))
    keep = w > _EIGENVALUE_FLOOR * max(float(w.max()), 1.0)
    if not keep.any():
        raise NumericalFailureError("landmark kernel block is numerically zero")
    w_kept = w[keep]
    q_kept = q[:, keep]
    inv = (q_kept / w_kept[None, :]) @ q_kept.T
    inv_sqrt = (q_kept / np.sqrt(w_kept)[None, :]) @ q_kept.T
    return inv, inv_sqrt


def nystrom_embed(
    fibers: Tractogram,
    m: int,
    params: AffinityParams,
    t: int = 10,
    seed: int = 0,
    landmark_rows: np.ndarray | None = None,
) -> SpectralEmbedding:
    """Landmark-approximated embedding of all fibers.

    Samples ``m`` landmarks (seeded, uniform, ``landmark_rows`` overrides),
    factorizes the landmark block, estimates degrees from the landmark
    approximation, and embeds every fiber through the extension formula.
    With ``m = len(fibers)`` this agrees with :func:`exact_embed` to within
    1e-6 per coordinate.
    """
    n = len(fibers)
    if n < 2:
        raise InvalidConfigError("need at least 2 fibers to embed")
    if m > n:
        raise InvalidConfigError(f"landmark count {m} exceeds fiber count {n}")
    if t < 1:
        raise InvalidConfigError("embedding dimension must be at least 1")
    if t >= m:
        raise InvalidConfigError(f"embedding dimension {t} must be below landmark count {m}")

    if landmark_rows is None:
        rng = np.random.default_rng(seed)
        landmark_rows = np.sort(rng.choice(n, size=m, replace=False))
    else:
        landmark_rows = np.asarray(landmark_rows, dtype=np.int64)
        if len(landmark_rows) != m:
            raise InvalidConfigError("landmark_rows length disagrees with m")

    stack = stack_resampled(fibers, params.points_per_fiber)
    landmark_stack = stack[landmark_rows]
    c = affinity(pairwise_fiber_distances(stack, landmark_stack, kind=params.kind), params)
    a = c[landmark_rows]

    a_inv, a_inv_sqrt = _floored_inverse_roots(a)
    z = a_inv @ c.sum(axis=0)
    degrees = np.maximum(c @ z, 1e-300)

    x = (c / np.sqrt(degrees)[:, None]) @ a_inv_sqrt
    m_small = x.T @ x
    w, vecs = np.linalg.eigh(0.5 * (m_small + m_small.T))
    order = np.argsort(w)[::-1]
    w, vecs = w[order], vecs[:, order]
    # sqrt(degrees) is an exact unit-eigenvalue eigenvector of the realized
    # approximation, so its pullback pins the degenerate group here too
    vecs = _align_leading_group(w, vecs, x.T @ np.sqrt(degrees))

    t_eff, truncated = _truncate_rank(w, t)
    eigenvalues = w[: t_eff + 1].copy()
    top = vecs[:, : t_eff + 1]
    basis = a_inv_sqrt @ (top / np.sqrt(eigenvalues)[None, :])

    ids = np.array([s.id for s in fibers], dtype=np.int64)
    emb = SpectralEmbedding(
        landmarks=landmark_stack,
        landmark_ids=ids[landmark_rows],
        eigenvalues=eigenvalues,
        basis=basis,
        degree_vector=z,
        coords=np.zeros((0, t_eff)),
        params=params,
        truncated=truncated,
    )
    # Embed the training fibers through the same extension used for
    # newcomers, pinning signs on the realized embedding columns.
    v_cols = (c / np.sqrt(degrees)[:, None]) @ basis
    flipped = basis.copy()
    _canonicalize_signs(v_cols, flipped)
    emb = replace(emb, basis=flipped)
    coords = _raw_extension(c, emb).coords
    return replace(emb, coords=coords)


def embed_new_fibers(
    e: SpectralEmbedding,
    newcomers: Tractogram,
    params: AffinityParams | None = None,
    *,
    min_kernel: float = LOW_CONFIDENCE_KERNEL,
) -> EmbeddedFibers:
    """Nystrom extension of an existing embedding to unseen fibers.

    Fibers whose best kernel value against the landmarks falls below
    ``min_kernel`` are flagged low-confidence and given zero coordinates;
    the default only catches numerically zero rows, while callers wanting
    a proximity gate can pass ``exp(-r**2)`` to cut fibers farther than
    ``r`` kernel widths from every landmark.
    """
    params = e.params if params is None else params
    if len(newcomers) == 0:
        return EmbeddedFibers(coords=np.zeros((0, e.dim)), low_confidence=np.zeros(0, bool))
    stack = stack_resampled(newcomers, params.points_per_fiber)
    kernel = affinity(pairwise_fiber_distances(stack, e.landmarks, kind=params.kind), params)
    return _raw_extension(kernel, e, min_kernel)


def kmeans_embedding(e: SpectralEmbedding, k: int, seed: int = 0) -> ClusteringResult:
    """Seeded k-means++ plus Lloyd iterations over the embedding rows.

    Deterministic for a fixed seed: seeding, tie-breaks (lowest index),
    and empty-cluster reseeding (farthest point) are all order-pinned.
    """
    x = e.coords
    n = x.shape[0]
    if k < 1:
        raise InvalidKError("cluster count must be at least 1")
    if k > n:
        raise InvalidKError(f"cluster count {k} exceeds fiber count {n}")

    rng = np.random.default_rng(seed)
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest_sq = ((x - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest_sq.sum()
        if total <= 1e-300:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest_sq / total))
        centers[c] = x[idx]
        closest_sq = np.minimum(closest_sq, ((x - centers[c]) ** 2).sum(axis=1))

    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(300):
        dist_sq = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dist_sq.argmin(axis=1)

        # farthest-point reseed keeps K from silently shrinking
        counts = np.bincount(new_labels, minlength=k)
        empties = np.flatnonzero(counts == 0)
        if len(empties):
            own = dist_sq[np.arange(n), new_labels].copy()
            for slot in empties:
                far = int(own.argmax())
                centers[slot] = x[far]
                new_labels[far] = slot
                own[far] = -1.0
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = labels == c
            if members.any():
                mean = x[members].mean(axis=0)
                centers[c] = mean / max(np.linalg.norm(mean), 1e-12)

    centroids = centers.copy()
    for c in range(k):
        members = labels == c
        if members.any():
            mean = x[members].mean(axis=0)
            centroids[c] = mean / max(np.linalg.norm(mean), 1e-12)

    scores = np.ones(n)
    for c in range(k):
        rows = np.flatnonzero(labels == c)
        if len(rows) > 1:
            member_x = x[rows]
            sums = member_x @ member_x.sum(axis=0)
            self_sim = (member_x * member_x).sum(axis=1)
            scores[rows] = (sums - self_sim) / (len(rows) - 1)
    return ClusteringResult(k=k, labels=labels, centroids=centroids, scores=scores)
