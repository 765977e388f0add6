"""Constrained random-walk rounding inside K = [0,1]^n of {x : M(x-y) = 0}.

The walk starts at a fractional point, takes small Gaussian steps projected
onto the orthogonal complement of the active constraint normals (rows of M
plus the coordinate axes of frozen variables), and freezes a coordinate the
moment a step carries it onto a hypercube face.  A full run repeats phases,
keeping only phases that at least halve the number of fractional
coordinates, until at most ``16 m`` fractional coordinates remain.

Implementation notes, all behavior-preserving with respect to the step
definition above:

* Gaussians are sampled over the free coordinates only; projecting a full
  n-dimensional Gaussian with the active-set projector zeroes the frozen
  components anyway, and the restriction of an i.i.d. Gaussian to a
  coordinate subspace is again i.i.d. Gaussian.
* The projector is fully recomputed after every freeze event (never
  incrementally updated).  The orthonormal row basis comes from an
  eigendecomposition of the constraint Gram matrix, which is an order of
  magnitude faster than a QR factorization at these shapes and yields the
  identical projector (rank-deficient row sets are handled by eigenvalue
  cutoff).
* Steps are drawn and screened in blocks; a block is interrupted at the first
  row that lands a coordinate within ``eps`` of a face, and that single step
  is shortened (or minimally extended, when the band was entered without
  crossing) so the binding coordinate lands exactly on its face.  All motion
  is therefore a scalar multiple of a null-space direction and the constraint
  residual is preserved to machine precision.  A coordinate is frozen only at
  a face it moves toward; a coordinate drifting within the band away from its
  face stays free until a later step carries it onto the face.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

RESIDUAL_LIMIT = 1e-6  # enforced on every phase output
_BLOCK_MIN, _BLOCK_MAX = 8, 256


class MaxPhasesExceeded(RuntimeError):
    """The phase budget ran out; ``partial`` holds the best result so far."""

    def __init__(self, message: str, partial: "WalkResult"):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class ConstraintSet:
    """Constraint rows M (m x n) and the starting fractional point y.

    The rounding guarantee additionally needs ``m <= n/16``; that bound is
    checked by :func:`lm_round`, not here, so small instances (used by the
    exhaustive vertex oracle) remain constructible.
    """

    matrix: Array
    y: Array

    def __post_init__(self):
        mat = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        y = np.asarray(self.y, dtype=np.float64)
        if mat.size and not np.all(np.isfinite(mat)):
            raise ValueError("constraint rows must be finite")
        if mat.shape[1] != y.shape[0] and mat.size:
            raise ValueError("matrix/y dimension mismatch")
        if np.any(y < 0) or np.any(y > 1):
            raise ValueError("y must lie in [0, 1]^n")
        if mat.size == 0:
            mat = mat.reshape(0, y.shape[0])
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "y", y)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def unit_rows(self) -> Array:
        """Rows scaled to unit 2-norm, zero rows dropped; same null space."""
        norms = np.linalg.norm(self.matrix, axis=1)
        keep = norms > 0
        return self.matrix[keep] / norms[keep, None]

    def residual(self, x: Array, ord=np.inf) -> float:
        if self.m == 0:
            return 0.0
        return float(np.linalg.norm(self.matrix @ (x - self.y), ord))


@dataclass(frozen=True)
class WalkConfig:
    """Step size, face band, per-phase step budget, and phase budget."""

    delta: float = 0.02
    eps: float | None = None  # defaults to delta
    steps_per_phase: int | None = None  # defaults to ceil(4 / delta^2)
    max_phases: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        eps = self.delta if self.eps is None else self.eps
        if not 0 < eps <= self.delta:
            raise ValueError("need 0 < eps <= delta")
        object.__setattr__(self, "eps", eps)
        steps = self.steps_per_phase
        if steps is None:
            steps = int(np.ceil(4.0 / self.delta ** 2))
        if steps < 1:
            raise ValueError("steps_per_phase must be >= 1")
        object.__setattr__(self, "steps_per_phase", steps)
        if self.max_phases < 1:
            raise ValueError("max_phases must be >= 1")


@dataclass(frozen=True)
class PhaseResult:
    x: Array
    frozen: Array
    saturated: bool  # no free directions were available
    newly_frozen: int


@dataclass
class WalkResult:
    x: Array
    frozen: Array
    phases: int  # phase attempts consumed, including discarded ones
    accepted_freeze_counts: list[int] = field(default_factory=list)
    residual_l2: float = 0.0
    fractional: int = 0


def fractional_count(x: Array) -> int:
    return int(np.sum((x > 0) & (x < 1)))


def _rowspace_basis(rows: Array) -> Array:
    """Orthonormal rows spanning the row space of ``rows`` (possibly empty)."""
    m = rows.shape[0]
    if m == 0:
        return rows
    gram = rows @ rows.T
    evals, evecs = np.linalg.eigh(gram)
    keep = evals > max(float(evals[-1]), 0.0) * 1e-12
    if not np.any(keep):
        return rows[:0]
    return (evecs[:, keep] / np.sqrt(evals[keep])).T @ rows


def _resolve_step(xf: Array, s: Array, eps: float):
    """Resolve one proposed step ``xf -> xf + s`` against the face bands.

    Returns ``(landed, None)`` when the full step is safe, or
    ``(landed, face_mask)`` when the step was rescaled so that at least one
    coordinate lands exactly on the face it was moving toward.
    """
    prop = xf + s
    with np.errstate(divide="ignore", invalid="ignore"):
        t_face = np.where(s > 0, (1.0 - xf) / s, np.where(s < 0, -xf / s, np.inf))
    toward = ((s > 0) & (prop >= 1.0 - eps)) | ((s < 0) & (prop <= eps))
    if not np.any(toward):
        # only band-sitters moving away from their face; no crossing possible
        return prop, None
    t = min(float(t_face[toward].min()), float(t_face.min()))
    landed = xf + t * s
    on_face = t_face == t
    landed[on_face & (s > 0)] = 1.0
    landed[on_face & (s < 0)] = 0.0
    return landed, on_face


def _run_phase(m_unit: Array, x: Array, frozen: Array, cfg: WalkConfig,
               rng: np.random.Generator) -> PhaseResult:
    x = x.copy()
    frozen = frozen.copy()
    # coordinates already sitting exactly on a face need no walk
    at_face = ~frozen & ((x == 0.0) | (x == 1.0))
    frozen |= at_face
    start_frozen = int(frozen.sum())

    free = np.flatnonzero(~frozen)
    if free.size == 0:
        return PhaseResult(x, frozen, True, 0)
    basis = _rowspace_basis(m_unit[:, free])
    if basis.shape[0] >= free.size:
        return PhaseResult(x, frozen, True, 0)

    xf = x[free]
    steps_left = cfg.steps_per_phase
    block = _BLOCK_MIN
    eps, delta = cfg.eps, cfg.delta
    while steps_left > 0 and free.size:
        nsteps = min(block, steps_left)
        gauss = rng.standard_normal((nsteps, free.size))
        moves = delta * (gauss - (gauss @ basis.T) @ basis)
        path = xf + np.cumsum(moves, axis=0)
        in_band = (path <= eps) | (path >= 1.0 - eps)
        trigger_rows = np.flatnonzero(in_band.any(axis=1))
        if trigger_rows.size == 0:
            xf = path[-1]
            steps_left -= nsteps
            block = min(block * 2, _BLOCK_MAX)
            continue
        froze_at = -1
        for k in trigger_rows:
            cur = path[k - 1] if k > 0 else xf
            landed, on_face = _resolve_step(cur, moves[k], eps)
            if on_face is None:
                continue  # full step stands; later path rows remain valid
            xf = landed
            steps_left -= int(k) + 1
            froze_at = k
            # write back, freeze, shrink the free set, rebuild the projector
            x[free] = xf
            newly = free[on_face]
            frozen[newly] = True
            free = free[~on_face]
            xf = x[free]
            if free.size:
                basis = _rowspace_basis(m_unit[:, free])
                if basis.shape[0] >= free.size:
                    free = free[:0]  # saturated mid-phase: stop walking
            break
        if froze_at < 0:
            xf = path[-1]
            steps_left -= nsteps
            block = min(block * 2, _BLOCK_MAX)
        else:
            block = _BLOCK_MIN
    if free.size:
        x[free] = xf
    return PhaseResult(x, frozen, False, int(frozen.sum()) - start_frozen)


def lm_phase(cs: ConstraintSet, x_in, frozen, cfg: WalkConfig) -> PhaseResult:
    """One walk phase: freeze coordinates until the step budget is spent.

    Requires ``x_in`` to satisfy the constraints to 1e-8 and frozen
    coordinates to be exactly integral.  The output constraint residual is
    enforced below ``1e-6``.
    """
    x_in = np.asarray(x_in, dtype=np.float64)
    frozen = np.asarray(frozen, dtype=bool)
    if np.any(x_in < 0) or np.any(x_in > 1):
        raise ValueError("x_in must lie in [0, 1]^n")
    if cs.residual(x_in) > 1e-8:
        raise ValueError("x_in violates the constraints beyond 1e-8")
    if not np.all(np.isin(x_in[frozen], (0.0, 1.0))):
        raise ValueError("frozen coordinates of x_in must be exactly 0 or 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x9A5E]))
    result = _run_phase(cs.unit_rows(), x_in, frozen, cfg, rng)
    if not np.all(np.isfinite(result.x)):
        raise FloatingPointError("non-finite walk iterate")
    if cs.residual(result.x) > RESIDUAL_LIMIT:
        raise FloatingPointError("constraint residual exceeded 1e-6 during the phase")
    return result


def lm_round(cs: ConstraintSet, cfg: WalkConfig) -> WalkResult:
    """Round until at most ``16 m`` fractional coordinates remain.

    Phases that fail to halve the fractional count are discarded and retried
    with fresh randomness; each attempt counts against ``max_phases``.  Raises
    :class:`MaxPhasesExceeded` (carrying the partial result) if the budget
    runs out.
    """
    if cs.m < 1:
        raise ValueError("lm_round needs at least one constraint row")
    if cs.m > cs.n / 16:
        raise ValueError(f"m = {cs.m} exceeds n/16 = {cs.n / 16}")
    target = 16 * cs.m
    m_unit = cs.unit_rows()
    x = cs.y.copy()
    frozen = np.isin(x, (0.0, 1.0))

    def result(phases: int, counts: list[int]) -> WalkResult:
        return WalkResult(x=x, frozen=frozen.copy(), phases=phases,
                          accepted_freeze_counts=counts,
                          residual_l2=cs.residual(x, ord=2),
                          fractional=fractional_count(x))

    counts: list[int] = []
    if fractional_count(x) <= target:
        return result(0, counts)
    for attempt in range(1, cfg.max_phases + 1):
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), attempt]))
        phase = _run_phase(m_unit, x, frozen, cfg, rng)
        if cs.residual(phase.x) > RESIDUAL_LIMIT:
            raise FloatingPointError("constraint residual exceeded 1e-6 during the phase")
        before = fractional_count(x)
        after = fractional_count(phase.x)
        if after <= target:
            x, frozen = phase.x, phase.frozen
            counts.append(phase.newly_frozen)
            return result(attempt, counts)
        if after <= before / 2:
            x, frozen = phase.x, phase.frozen
            counts.append(phase.newly_frozen)
        elif phase.saturated:
            break
    raise MaxPhasesExceeded(
        f"no vertex with <= {target} fractional coordinates within "
        f"{cfg.max_phases} phases", result(cfg.max_phases, counts))


def vertex_integrality_check(cs: ConstraintSet, x, eps: float = 1e-9) -> tuple[int, float]:
    """(number of coordinates farther than eps from both faces, residual)."""
    x = np.asarray(x, dtype=np.float64)
    count = int(np.sum((x > eps) & (x < 1.0 - eps)))
    return count, cs.residual(x)


def walk_variance_probe(cs: ConstraintSet, cfg: WalkConfig, theta, trials: int) -> float:
    """Monte-Carlo estimate of E[<theta, x - y>^2] over independent phases."""
    if trials < 30:
        raise ValueError("need at least 30 trials")
    theta = np.asarray(theta, dtype=np.float64)
    frozen0 = np.isin(cs.y, (0.0, 1.0))
    m_unit = cs.unit_rows()
    total = 0.0
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0xBEE, t]))
        phase = _run_phase(m_unit, cs.y, frozen0, cfg, rng)
        total += float(theta @ (phase.x - cs.y)) ** 2
    return total / trials
