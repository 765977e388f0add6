"""Data-dependent rounding by projected stochastic gradient descent.

The rounding is parameterized by interpolation variables ``x`` in ``[0,1]^n``
between the two bracketing grid points of every weight.  The objective
combines a linear vertex-steering term ``<c*, x>`` with ``c* = 1 - 2y`` (its
minimum over almost-integral ``x`` is the vertex nearest the original
weights) and the KL divergence from the original model's next-token
distributions to the interpolated model's.  After every optimizer step ``x``
is projected back onto the hypercube by entrywise clamping; leftover
fractional coordinates are rounded to the nearest bracket endpoint at the
end.

Only the KL-term gradient is clamped entrywise; the linear term's gradient
is exact and bounded already.  ``lambda_on`` selects which term the weight
``lam`` multiplies.  The two placements differ only by a global objective
rescaling, but that rescaling interacts with the optimizer's per-coordinate
adaptivity and the gradient clamp: at the stock ``lam = 200``, weighting the
linear term makes the vertex pressure swamp the clamped KL signal and the
output collapses to plain nearest rounding, while weighting the KL term (the
default here, and the placement the stock hyperparameters were tuned for)
leaves room for the data to steer near-tied coordinates.  Cranking ``lam``
up under ``lambda_on="linear"`` recovers nearest rounding exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (Bracket, InterpState, QuantGrid, bracket_of, interp_weights,
                   nearer_up)
from .optim import AdamW, warmup_cosine_lr
from .toymodel import SampleBatch, ToyModel, kl_term, sample_sequences

Array = np.ndarray


class _Identity:
    """Trivial weight-space adapter: quantization space == model space."""

    @staticmethod
    def to_q(w):
        return w

    from_q = to_q
    grad_to_q = to_q


@dataclass(frozen=True)
class DiscQuantConfig:
    lam: float = 200.0
    lr: float = 0.1
    batch_size: int = 4
    iterations: int = 1024
    warmup: int = 128
    clamp: float = 1.0
    tau: float = 1e-3  # integrality reporting threshold, not an algorithm knob
    lambda_on: str = "kl"
    init: str = "uniform-random"
    seq_length: int = 8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if self.lr <= 0 or self.clamp <= 0:
            raise ValueError("lr and clamp must be positive")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")
        if not 0 <= self.warmup <= self.iterations:
            raise ValueError("need 0 <= warmup <= iterations")
        if not 0 < self.tau < 0.5:
            raise ValueError("tau must lie in (0, 1/2)")
        if self.lambda_on not in ("linear", "kl"):
            raise ValueError("lambda_on must be 'linear' or 'kl'")
        if self.init not in ("uniform-random", "original-weights"):
            raise ValueError("init must be 'uniform-random' or 'original-weights'")


@dataclass
class RoundingReport:
    x: Array
    fractional_fraction: float  # share of coordinates with min(x, 1-x) > tau
    trace_linear: Array  # per-step linear-term value (weighted as configured)
    trace_kl: Array  # per-step KL-term value (weighted as configured)
    trace_fractional: Array  # per-step fractional share
    quantized: Array  # final on-grid vector in quantization space
    model_params: Array  # final weights in model space
    heldout_kl: float | None = None


class NonFiniteObjective(FloatingPointError):
    """Objective or gradient became non-finite; traces so far attached."""

    def __init__(self, message: str, trace_linear, trace_kl):
        super().__init__(message)
        self.trace_linear = np.asarray(trace_linear)
        self.trace_kl = np.asarray(trace_kl)


def cstar(y) -> Array:
    """Vertex-steering direction 1 - 2y.

    For integral x, <c*, x> + |y|^2 equals |x - y|^2, so minimizing the
    linear form finds the vertex nearest y.
    """
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0) or np.any(y > 1):
        raise ValueError("y must lie in [0, 1]^n")
    return 1.0 - 2.0 * y


def init_x(mode: str, bracket: Bracket, seed: int = 0) -> Array:
    """Starting point: i.i.d. uniform, or the original weights' position."""
    if mode == "original-weights":
        return bracket.position()
    if mode == "uniform-random":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1217]))
        return rng.random(bracket.n)
    raise ValueError(f"unknown init mode {mode!r}")


def finalize(x, bracket: Bracket, tau: float) -> Array:
    """Snap x to bracket endpoints: threshold at tau, then nearest-by-value.

    Midpoint ties follow the grid tie rule (smaller-magnitude point wins).
    """
    x = np.asarray(x, dtype=np.float64)
    wx = bracket.w_down * (1.0 - x) + bracket.w_up * x
    near_up = nearer_up(wx, bracket.w_down, bracket.w_up)
    take_up = np.where(x >= 1.0 - tau, True, np.where(x <= tau, False, near_up))
    return np.where(take_up, bracket.w_up, bracket.w_down)


def _teacher_stream(teacher: ToyModel, cfg: DiscQuantConfig):
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x57E4]))
    while True:
        yield sample_sequences(teacher, cfg.batch_size, cfg.seq_length, rng=rng)


def optimize(teacher: ToyModel, grid: QuantGrid, cfg: DiscQuantConfig,
             data_stream=None, heldout: SampleBatch | None = None,
             transform=None) -> RoundingReport:
    """Round the teacher's weights on ``grid`` by projected SGD, then snap.

    ``grid`` must be built over the teacher weights as seen in quantization
    space (identity by default; pass ``transform`` to round in a transformed
    space).  ``data_stream`` overrides the default stream of fresh
    teacher-sampled batches; exhausting it raises ``ValueError``.
    """
    transform = transform or _Identity
    wq = transform.to_q(teacher.params)
    if grid.n != wq.shape[0]:
        raise ValueError(f"grid covers {grid.n} coordinates, weights have {wq.shape[0]}")
    bracket = bracket_of(wq, grid)
    y = bracket.position()
    cvec = cstar(y)
    x = init_x(cfg.init, bracket, cfg.seed)
    opt = AdamW(bracket.n, lr=cfg.lr, weight_decay=cfg.weight_decay)
    stream = iter(data_stream) if data_stream is not None else _teacher_stream(teacher, cfg)

    trace_linear, trace_kl, trace_frac = [], [], []
    no_freeze = np.zeros(bracket.n, dtype=bool)
    for step in range(1, cfg.iterations + 1):
        try:
            batch = next(stream)
        except StopIteration:
            raise ValueError("data stream exhausted before the final iteration") from None
        wq_x = interp_weights(InterpState(x, no_freeze, bracket))
        student = teacher.with_params(transform.from_q(wq_x))
        kl_value, kl_grad_model = kl_term(teacher, student, batch)
        kl_grad_x = np.clip(transform.grad_to_q(kl_grad_model) * bracket.delta,
                            -cfg.clamp, cfg.clamp)
        if cfg.lambda_on == "linear":
            grad = cfg.lam * cvec + kl_grad_x
            lin_value, kl_weighted = cfg.lam * float(cvec @ x), kl_value
        else:
            grad = cvec + cfg.lam * kl_grad_x
            lin_value, kl_weighted = float(cvec @ x), cfg.lam * kl_value
        if not (np.isfinite(lin_value) and np.isfinite(kl_weighted)
                and np.all(np.isfinite(grad))):
            raise NonFiniteObjective(f"non-finite objective at step {step}",
                                     trace_linear, trace_kl)
        trace_linear.append(lin_value)
        trace_kl.append(kl_weighted)
        x = np.clip(opt.step(x, grad, lr=warmup_cosine_lr(cfg.lr, cfg.warmup,
                                                          cfg.iterations, step)),
                    0.0, 1.0)
        trace_frac.append(float(np.mean(np.minimum(x, 1.0 - x) > cfg.tau)))

    quantized = finalize(x, bracket, cfg.tau)
    model_params = transform.from_q(quantized)
    heldout_kl = None
    if heldout is not None:
        heldout_kl, _ = kl_term(teacher, teacher.with_params(model_params), heldout)
    return RoundingReport(
        x=x,
        fractional_fraction=float(np.mean(np.minimum(x, 1.0 - x) > cfg.tau)),
        trace_linear=np.array(trace_linear),
        trace_kl=np.array(trace_kl),
        trace_fractional=np.array(trace_frac),
        quantized=quantized,
        model_params=model_params,
        heldout_kl=heldout_kl,
    )
