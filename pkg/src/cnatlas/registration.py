"""Groupwise affine alignment of multiple subjects' tractograms.

Aligns every subject into a shared frame by minimizing a kernel
cross-likelihood: each fiber is scored by the mean Gaussian affinity to
the pooled fibers of all other subjects, and the negative log-likelihoods
are summed.  Optimization is derivative-free coordinate descent over a
coarse-to-fine kernel width schedule.  Two global symmetries need pinning:

* collapse (any shared contraction of the pooled density, uniform or
  strain-like) is excluded by keeping every scale and shear component at
  zero mean across subjects, which pins the mean log-determinant of the
  linear parts at exactly zero; the projection onto that constraint is
  folded into each deforming candidate so accepted steps are true
  constrained improvements
* rigid gauge freedom (moving everyone together) is removed by re-centering
  the transform set around its mean rigid motion after each sweep, which
  leaves the objective value untouched
"""

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .core import (
    AffineTransform,
    DistanceKind,
    Tractogram,
    pairwise_fiber_distances,
    sample_tractogram,
    stack_resampled,
    transform_tractogram,
)
from .errors import (
    ArityError,
    EmptySubjectError,
    InvalidConfigError,
    NumericalFailureError,
    PointCountMismatchError,
)

_MIN_STEP_MM = 0.05
_ACCEPT_MARGIN = 1e-10
_MAX_LINE_REPEATS = 64
_MAX_ANGLE_STEP = 0.35
_MAX_DEFORM_STEP = 0.2
# search bounds per parameter kind; the method is a local refiner for
# modest misalignments, and bounding the excursion keeps near-symmetric
# bundles from escaping into flipped configurations at coarse sigma
_PARAM_BOUNDS = np.array([0.6] * 3 + [40.0] * 3 + [0.3] * 3 + [0.3] * 3)

# parameter vector layout: rotations(3), translations(3), log-scales(3), shears(3)
_ROT = slice(0, 3)
_TRA = slice(3, 6)
_SCL = slice(6, 9)
_SHR = slice(9, 12)


class Dof(Enum):
    """Degrees of freedom of the per-subject transform."""

    RIGID = 6
    SIMILARITY = 7
    AFFINE = 12


@dataclass(frozen=True)
class RegistrationConfig:
    sigma_schedule: tuple[float, ...] = (20.0, 10.0, 5.0, 2.0)
    points_per_fiber: int = 5
    fibers_per_subject: int = 2000
    dof: Dof = Dof.AFFINE
    max_iters_per_level: int = 10
    convergence_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        sched = tuple(float(s) for s in self.sigma_schedule)
        object.__setattr__(self, "sigma_schedule", sched)
        if not sched:
            raise InvalidConfigError("sigma schedule must not be empty")
        if any(s <= 0 for s in sched):
            raise InvalidConfigError("sigma values must be positive")
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise InvalidConfigError("sigma schedule must be strictly decreasing")
        if self.points_per_fiber < 2:
            raise InvalidConfigError("points_per_fiber must be at least 2")
        if self.fibers_per_subject < 10:
            raise InvalidConfigError("fibers_per_subject must be at least 10")
        if self.max_iters_per_level < 1:
            raise InvalidConfigError("max_iters_per_level must be at least 1")
        if self.convergence_tol <= 0:
            raise InvalidConfigError("convergence_tol must be positive")
        if isinstance(self.dof, str):
            try:
                object.__setattr__(self, "dof", Dof[self.dof.upper()])
            except KeyError:
                raise InvalidConfigError(f"unknown dof {self.dof!r}") from None
        elif not isinstance(self.dof, Dof):
            raise InvalidConfigError(f"unknown dof {self.dof!r}")


@dataclass(frozen=True)
class GroupRegistrationResult:
    transforms: tuple[AffineTransform, ...]
    final_objective: float
    trace: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if not self.transforms:
            raise InvalidConfigError("result needs at least one transform")
        logdets = [np.log(np.linalg.det(x.linear)) for x in self.transforms]
        if abs(float(np.mean(logdets))) > 1e-6:
            raise InvalidConfigError(
                "transforms violate the anti-collapse constraint "
                f"(mean log-determinant {np.mean(logdets):.3e})"
            )


# ---------------------------------------------------------------------------
# parameter vector <-> transform


def _rotation(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    r_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    r_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    r_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return r_z @ r_y @ r_x


def _params_to_transform(p: np.ndarray) -> AffineTransform:
    rot = _rotation(p[0], p[1], p[2])
    scale = np.diag(np.exp(p[_SCL]))
    shear = np.array([[1.0, p[9], p[10]], [0.0, 1.0, p[11]], [0.0, 0.0, 1.0]])
    return AffineTransform.from_parts(rot @ scale @ shear, p[_TRA])


def _transform_to_params(x: AffineTransform) -> np.ndarray:
    """Invert the rotation * scale * shear factorization via QR."""
    q, r = np.linalg.qr(x.linear)
    flip = np.sign(np.diag(r))
    flip[flip == 0] = 1.0
    q = q * flip[None, :]
    r = r * flip[:, None]

    p = np.zeros(12)
    # q = Rz(rz) Ry(ry) Rx(rx); standard Euler extraction
    p[1] = np.arcsin(np.clip(-q[2, 0], -1.0, 1.0))
    p[2] = np.arctan2(q[1, 0], q[0, 0])
    p[0] = np.arctan2(q[2, 1], q[2, 2])
    diag = np.diag(r)
    p[_SCL] = np.log(diag)
    p[9] = r[0, 1] / diag[0]
    p[10] = r[0, 2] / diag[0]
    p[11] = r[1, 2] / diag[1]
    p[_TRA] = x.translation.ravel()
    return p


def _moves(dof: Dof) -> tuple[tuple[int, ...], ...]:
    rigid = tuple((i,) for i in range(6))
    if dof is Dof.RIGID:
        return rigid
    if dof is Dof.SIMILARITY:
        return rigid + ((6, 7, 8),)
    return rigid + tuple((i,) for i in range(6, 12))


# ---------------------------------------------------------------------------
# objective


def _log_mean_kernel(d: np.ndarray, sigma: float) -> np.ndarray:
    """Row-wise log mean Gaussian kernel, finite for any distances."""
    q = (d / sigma) ** 2
    m = q.min(axis=1)
    return -m + np.log(np.mean(np.exp(-(q - m[:, None])), axis=1))


def _blocks_objective(
    blocks: dict[tuple[int, int], np.ndarray], n: int, sigma: float
) -> float:
    total = 0.0
    for s in range(n):
        row = np.hstack(
            [blocks[(s, t)] if s < t else blocks[(t, s)].T for t in range(n) if t != s]
        )
        total -= float(np.sum(_log_mean_kernel(row, sigma)))
    return total


def _all_blocks(mapped: list[np.ndarray]) -> dict[tuple[int, int], np.ndarray]:
    n = len(mapped)
    return {
        (s, t): pairwise_fiber_distances(
            mapped[s], mapped[t], kind=DistanceKind.POINTWISE_MEAN
        )
        for s in range(n)
        for t in range(s + 1, n)
    }


def registration_objective(
    subjects: Sequence[Tractogram],
    transforms: Sequence[AffineTransform],
    sigma: float,
) -> float:
    """Group misalignment score; lower is better, zero at perfect overlap.

    Sums, over every fiber, the negative log of its mean Gaussian affinity
    to the pooled fibers of the other subjects after mapping each subject
    through its transform.  Fibers must share one point count.
    """
    if len(subjects) != len(transforms):
        raise ArityError(
            f"{len(subjects)} subjects but {len(transforms)} transforms"
        )
    if len(subjects) < 2:
        raise InvalidConfigError("need at least 2 subjects")
    if sigma <= 0:
        raise InvalidConfigError("sigma must be positive")

    counts = set()
    for idx, t in enumerate(subjects):
        if len(t) == 0:
            raise EmptySubjectError(f"subject {idx} has no fibers")
        counts.update(len(s.points) for s in t)
    if len(counts) != 1:
        raise PointCountMismatchError(
            f"subjects mix point counts {sorted(counts)}"
        )

    mapped = [
        np.stack([x.apply(s.points) for s in t])
        for t, x in zip(subjects, transforms)
    ]
    return _blocks_objective(_all_blocks(mapped), len(mapped), sigma)


# ---------------------------------------------------------------------------
# optimizer state


class _GroupState:
    """Current transforms plus cached mapped stacks and distance blocks.

    Rigid candidates only refresh the moved subject's blocks.  Scale and
    shear candidates are evaluated with the anti-collapse projection
    applied to the whole parameter set (subtract the subject-mean of every
    deformation component), which touches every subject, so those rebuild
    the full cache on acceptance.
    """

    def __init__(self, base: list[np.ndarray], constrain_deformation: bool):
        self.base = base
        self.n = len(base)
        self.params = np.zeros((self.n, 12))
        self.constrain_deformation = constrain_deformation
        self.mapped = [b.copy() for b in base]
        self.blocks = _all_blocks(self.mapped)

    def _map(self, s: int, p: np.ndarray) -> np.ndarray:
        x = _params_to_transform(p)
        return self.base[s] @ x.linear.T + x.translation.ravel()

    def objective(self, sigma: float) -> float:
        return _blocks_objective(self.blocks, self.n, sigma)

    def try_move(
        self, s: int, p_new: np.ndarray, sigma: float, current: float
    ) -> float | None:
        """Evaluate a candidate; accept and return its value if it improves."""
        if np.any(np.abs(p_new) > _PARAM_BOUNDS):
            return None
        deformed = bool(np.any(p_new[6:12] != self.params[s, 6:12]))
        if deformed and self.constrain_deformation:
            trial = self.params.copy()
            trial[s] = p_new
            trial[:, 6:12] -= trial[:, 6:12].mean(axis=0)[None, :]
            mapped = [self._map(t, trial[t]) for t in range(self.n)]
            blocks = _all_blocks(mapped)
            value = _blocks_objective(blocks, self.n, sigma)
            if not np.isfinite(value):
                raise NumericalFailureError(f"objective diverged at sigma {sigma}")
            if value < current - _ACCEPT_MARGIN:
                self.params = trial
                self.mapped = mapped
                self.blocks = blocks
                return value
            return None

        mapped_s = self._map(s, p_new)
        fresh = {}
        for t in range(self.n):
            if t == s:
                continue
            d = pairwise_fiber_distances(
                mapped_s, self.mapped[t], kind=DistanceKind.POINTWISE_MEAN
            )
            fresh[(s, t) if s < t else (t, s)] = d if s < t else d.T
        trial_blocks = dict(self.blocks)
        trial_blocks.update(fresh)
        value = _blocks_objective(trial_blocks, self.n, sigma)
        if not np.isfinite(value):
            raise NumericalFailureError(f"objective diverged at sigma {sigma}")
        if value < current - _ACCEPT_MARGIN:
            self.params[s] = p_new
            self.mapped[s] = mapped_s
            self.blocks = trial_blocks
            return value
        return None

    def recenter(self, frozen: set[int]) -> None:
        """Remove the mean rigid motion; exactly objective-preserving."""
        if frozen:
            return
        rotations = []
        for s in range(self.n):
            x = _params_to_transform(self.params[s])
            u, _, vt = np.linalg.svd(x.linear)
            r = u @ vt
            if np.linalg.det(r) < 0:
                r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
            rotations.append(r)
        u, _, vt = np.linalg.svd(np.mean(rotations, axis=0))
        r_mean = u @ vt
        if np.linalg.det(r_mean) < 0:
            r_mean = u @ np.diag([1.0, 1.0, -1.0]) @ vt
        t_mean = np.mean(
            [_params_to_transform(p).translation.ravel() for p in self.params], axis=0
        )
        gauge_inv = AffineTransform.from_parts(r_mean, t_mean).inverse()
        for s in range(self.n):
            recentred = gauge_inv.compose(_params_to_transform(self.params[s]))
            self.params[s] = _transform_to_params(recentred)
        for t in range(self.n):
            self.mapped[t] = self._map(t, self.params[t])

    def transforms(self) -> tuple[AffineTransform, ...]:
        return tuple(_params_to_transform(p) for p in self.params)


def _optimize(
    base: list[np.ndarray],
    cfg: RegistrationConfig,
    frozen: set[int],
    constrain_deformation: bool,
) -> tuple[tuple[AffineTransform, ...], float, tuple[tuple[float, ...], ...]]:
    state = _GroupState(base, constrain_deformation)
    all_points = np.concatenate([b.reshape(-1, 3) for b in base])
    spread = all_points - all_points.mean(axis=0)
    # characteristic radius converts mm steps into angle/scale/shear steps
    r0 = max(float(np.sqrt(np.mean(np.sum(spread**2, axis=1)))), 1.0)

    moves = _moves(cfg.dof)
    active = [s for s in range(state.n) if s not in frozen]
    traces = []
    for sigma in cfg.sigma_schedule:
        current = state.objective(sigma)
        if not np.isfinite(current):
            raise NumericalFailureError(f"objective is not finite at sigma {sigma}")
        level = [current]
        step = sigma / 2.0
        for _ in range(cfg.max_iters_per_level):
            before = level[-1]
            for s in active:
                for move in moves:
                    if move[0] in (3, 4, 5):
                        unit = step
                    elif move[0] in (0, 1, 2):
                        # cap so large rotations must earn their way through
                        # the badly scoring intermediate angles
                        unit = min(step / r0, _MAX_ANGLE_STEP)
                    else:
                        unit = min(step / r0, _MAX_DEFORM_STEP)
                    accepted_here = 0
                    for direction in (1.0, -1.0):
                        # greedy line search: keep stepping while it helps
                        while accepted_here < _MAX_LINE_REPEATS:
                            p_new = state.params[s].copy()
                            for idx in move:
                                p_new[idx] += direction * unit
                            value = state.try_move(s, p_new, sigma, level[-1])
                            if value is None:
                                break
                            level.append(value)
                            accepted_here += 1
                        if accepted_here:
                            break  # productive direction; its mirror only undoes
            state.recenter(frozen)
            rel = (before - level[-1]) / max(abs(before), 1.0)
            if step > _MIN_STEP_MM + 1e-12:
                step = max(step / 2.0, _MIN_STEP_MM)
            elif rel < cfg.convergence_tol:
                break
        traces.append(tuple(level))
    return state.transforms(), traces[-1][-1], tuple(traces)


def _prepare_stacks(
    subjects: Sequence[Tractogram], cfg: RegistrationConfig
) -> list[np.ndarray]:
    stacks = []
    for idx, t in enumerate(subjects):
        if len(t) == 0:
            raise EmptySubjectError(f"subject {idx} has no fibers")
        sampled = sample_tractogram(t, cfg.fibers_per_subject, seed=cfg.seed + idx)
        stacks.append(stack_resampled(sampled, cfg.points_per_fiber))
    return stacks


def groupwise_affine_register(
    subjects: Sequence[Tractogram], cfg: RegistrationConfig
) -> GroupRegistrationResult:
    """Align all subjects into a shared frame.

    Subsamples and resamples each subject, then runs coordinate descent
    over the sigma schedule, coarse to fine.  Deterministic for a fixed
    config.  The returned transforms keep the mean log-determinant of
    their linear parts at zero, and each level's objective trace is
    non-increasing.
    """
    if len(subjects) < 2:
        raise InvalidConfigError("need at least 2 subjects")
    stacks = _prepare_stacks(subjects, cfg)
    transforms, final, traces = _optimize(
        stacks, cfg, frozen=set(), constrain_deformation=True
    )
    return GroupRegistrationResult(transforms, final, traces)


def apply_group_transforms(
    subjects: Sequence[Tractogram], result: GroupRegistrationResult
) -> list[Tractogram]:
    """Map each subject by its transform; ids and provenance pass through."""
    if len(subjects) != len(result.transforms):
        raise ArityError(
            f"{len(subjects)} subjects but {len(result.transforms)} transforms"
        )
    return [
        transform_tractogram(t, x) for t, x in zip(subjects, result.transforms)
    ]


def register_to_reference(
    moving: Tractogram, reference: Tractogram, cfg: RegistrationConfig
) -> tuple[AffineTransform, tuple[tuple[float, ...], ...]]:
    """Align one subject onto a fixed reference tractogram.

    The reference keeps the identity transform; only the moving subject is
    optimized, with no scale constraint (the fixed side already pins the
    frame and its scale).  Returns the moving transform and the per-level
    objective trace.
    """
    stacks = _prepare_stacks([moving, reference], cfg)
    transforms, _, traces = _optimize(
        stacks, cfg, frozen={1}, constrain_deformation=False
    )
    return transforms[0], traces
