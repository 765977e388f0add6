"""Experiment orchestration: validated configs, seeded trials, three headline
studies, and deterministic report emission.

Per-trial seeds derive from the master seed through a counter, so growing the
trial count never perturbs existing trials.  Reports carry one row per
measurement with its seed; summaries are recomputable from the rows, and
re-running an experiment with the same config reproduces the rows byte for
byte (wall-clock time lives outside the rows).
"""

from __future__ import annotations

import dataclasses
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .discquant import DiscQuantConfig, optimize as dq_optimize
from .incoherence import ModelIncoherence
from .lmwalk import WalkConfig
from .pipeline import METHODS, quantize_model
from .serialize import canonical_json
from .speclab import SpectrumSpec, falpha_scaling_study, generalization_study
from .toymodel import (SampleBatch, ToyArch, ToyModel, ce_loss_rows,
                       first_order_study, random_model, sample_sequences)
from .grid import explicit_grid, rtn

SCHEMA_VERSION = 1
WORKERS_ENV = "DQ_WORKERS"

EXPERIMENTS = ("comparison", "first_order", "scaling")


def child_seed(master: int, *key: int) -> int:
    """Counter-mode seed derivation; stable and collision-resistant."""
    ss = np.random.SeedSequence([int(master), *[int(k) for k in key]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass(frozen=True)
class ComparisonParams:
    bits_levels: tuple[int, ...] = (2, 3, 4)
    groupsize: int | None = 16
    methods: tuple[str, ...] = ("rtn", "discquant")
    heldout: int = 256
    seq_length: int = 8
    walk_samples: int = 48
    incoherence: bool = False
    incoh_seed: int = 0
    data_mix: float = 0.0  # fraction of quantization data taken from a second source
    arch: ToyArch = ToyArch()
    discquant: DiscQuantConfig = DiscQuantConfig()
    walk: WalkConfig = WalkConfig(delta=0.04)

    def __post_init__(self):
        if not self.bits_levels or any(b < 2 for b in self.bits_levels):
            raise ValueError("bits levels must all be >= 2")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.heldout < 1:
            raise ValueError("heldout batch must be nonempty")
        if not 0.0 <= self.data_mix <= 1.0:
            raise ValueError("data_mix must lie in [0, 1]")


@dataclass(frozen=True)
class FirstOrderParams:
    deltas: tuple[float, ...] = (0.08, 0.04, 0.02)
    sequences: int = 24
    seq_length: int = 8
    methods: tuple[str, ...] = ("rtn",)
    include_zero_arm: bool = False
    arch: ToyArch = ToyArch()

    def __post_init__(self):
        if not self.deltas or any(d <= 0 for d in self.deltas):
            raise ValueError("grid spacings must be positive")
        if any(b >= a for a, b in zip(self.deltas, self.deltas[1:])):
            raise ValueError("list spacings from coarsest to finest")
        if self.sequences < 2:
            raise ValueError("need at least 2 sequences")


@dataclass(frozen=True)
class ScalingParams:
    estimator_alphas: tuple[float, ...] = (1.25, 2.5)
    estimator_n: int = 256
    estimator_m_grid: tuple[int, ...] = (32, 64, 128, 256, 512)
    estimator_trials: int = 24
    gen_alpha: float = 2.0
    gen_n: int = 1024
    gen_m_grid: tuple[int, ...] = (8, 16, 32, 64)
    gen_trials: int = 20
    walk: WalkConfig = WalkConfig(delta=0.04)
    run_estimator: bool = True
    run_generalization: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seed: int = 0
    trials: int = 8
    outdir: str | None = None  # default output directory for emitted reports
    params: ComparisonParams | FirstOrderParams | ScalingParams = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        expected = {"comparison": ComparisonParams, "first_order": FirstOrderParams,
                    "scaling": ScalingParams}[self.experiment]
        params = self.params if self.params is not None else expected()
        if not isinstance(params, expected):
            raise ValueError(f"params must be a {expected.__name__}")
        object.__setattr__(self, "params", params)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        experiment = raw.pop("experiment")
        params_raw = dict(raw.pop("params", {}))
        maker = {"comparison": _comparison_from_dict, "first_order": _first_order_from_dict,
                 "scaling": _scaling_from_dict}.get(experiment)
        if maker is None:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}")
        return cls(experiment=experiment, params=maker(params_raw),
                   **{k: raw[k] for k in ("seed", "trials", "outdir") if k in raw})


def _tupled(raw: dict, *names: str) -> dict:
    out = dict(raw)
    for name in names:
        if name in out and out[name] is not None:
            out[name] = tuple(out[name])
    return out


def _comparison_from_dict(raw: dict) -> ComparisonParams:
    raw = _tupled(raw, "bits_levels", "methods")
    if "arch" in raw:
        raw["arch"] = ToyArch(**raw["arch"])
    if "discquant" in raw:
        raw["discquant"] = DiscQuantConfig(**raw["discquant"])
    if "walk" in raw:
        raw["walk"] = WalkConfig(**raw["walk"])
    gs = raw.get("groupsize")
    if gs in ("per-tensor",):
        raw["groupsize"] = None
    return ComparisonParams(**raw)


def _first_order_from_dict(raw: dict) -> FirstOrderParams:
    raw = _tupled(raw, "deltas", "methods")
    if "arch" in raw:
        raw["arch"] = ToyArch(**raw["arch"])
    return FirstOrderParams(**raw)


def _scaling_from_dict(raw: dict) -> ScalingParams:
    raw = _tupled(raw, "estimator_alphas", "estimator_m_grid", "gen_m_grid")
    if "walk" in raw:
        raw["walk"] = WalkConfig(**raw["walk"])
    return ScalingParams(**raw)


def _config_echo(cfg: ExperimentConfig) -> dict:
    def scrub(value):
        if dataclasses.is_dataclass(value):
            return {k: scrub(v) for k, v in dataclasses.asdict(value).items()}
        if isinstance(value, tuple):
            return [scrub(v) for v in value]
        if isinstance(value, np.floating):
            return float(value)
        if isinstance(value, np.integer):
            return int(value)
        return value

    return {"experiment": cfg.experiment, "seed": cfg.seed, "trials": cfg.trials,
            "outdir": cfg.outdir, "params": scrub(cfg.params)}


@dataclass
class Report:
    experiment: str
    config: dict
    rows: list[dict]
    summary: dict
    artifact_version: str = __version__
    schema_version: int = SCHEMA_VERSION
    wall_clock: float = 0.0

    def to_record(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "experiment": self.experiment,
            "artifact_version": self.artifact_version,
            "config": self.config,
            "rows": self.rows,
            "summary": self.summary,
            "wall_clock": self.wall_clock,
        }

    @property
    def failed_rows(self) -> list[dict]:
        return [r for r in self.rows if r.get("error")]


def _map_trials(fn, seeds):
    """Run one callable per trial seed, optionally in a process pool."""
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers <= 1 or len(seeds) <= 1:
        results = [fn(s) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, seeds))
    return results


def _mixed_stream(teacher: ToyModel, cfg: DiscQuantConfig, mix: float, seed: int):
    """Fresh batches, a ``mix`` fraction of sequences from a uniform source."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x313]))
    arch = teacher.arch
    while True:
        batch = sample_sequences(teacher, cfg.batch_size, cfg.seq_length, rng=rng)
        seqs = batch.sequences.copy()
        swap = rng.random(cfg.batch_size) < mix
        if np.any(swap):
            seqs[swap] = rng.integers(0, arch.vocab, size=(int(swap.sum()), cfg.seq_length))
        yield SampleBatch(sequences=seqs)


def _comparison_trial(args) -> list[dict]:
    cfg, trial = args
    p: ComparisonParams = cfg.params
    seed = child_seed(cfg.seed, trial)
    teacher = random_model(p.arch, seed=seed)
    heldout = sample_sequences(teacher, p.heldout, p.seq_length,
                               seed=child_seed(seed, 0xE7A1))
    transform = ModelIncoherence(p.arch, seed=child_seed(p.incoh_seed, trial)) \
        if p.incoherence else None
    rows = []
    for bits in p.bits_levels:
        for method in p.methods:
            row = {"seed": seed, "trial": trial, "bits": bits, "method": method,
                   "groupsize": "per-tensor" if p.groupsize is None else p.groupsize,
                   "incoherence": p.incoherence}
            stream = None
            if method == "discquant" and p.data_mix > 0.0:
                stream = _mixed_stream(teacher, p.discquant, p.data_mix,
                                       child_seed(seed, 0x312))
            try:
                outcome = quantize_model(
                    teacher, bits, p.groupsize, method, seed=seed,
                    transform=transform, dq_cfg=p.discquant, walk_cfg=p.walk,
                    walk_samples=p.walk_samples, heldout=heldout,
                    data_stream=stream)
                row.update(bits_per_param=outcome.bits_per_param,
                           heldout_kl=outcome.heldout_kl,
                           fractional=outcome.fractional,
                           flags=list(outcome.flags), error=None)
            except Exception as exc:  # record the failure, keep the run alive
                row.update(bits_per_param=None, heldout_kl=None, fractional=None,
                           flags=[], error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    return rows


def run_comparison(cfg: ExperimentConfig) -> Report:
    """RTN / DiscQuant / walk arms over seeded teachers and bit widths."""
    if cfg.experiment != "comparison":
        raise ValueError("config is not a comparison experiment")
    start = time.perf_counter()
    p: ComparisonParams = cfg.params
    chunks = _map_trials(_comparison_trial, [(cfg, t) for t in range(cfg.trials)])
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (r["seed"], r["bits"], r["method"]))
    summary = {}
    for bits in p.bits_levels:
        for method in p.methods:
            kls = [r["heldout_kl"] for r in rows
                   if r["bits"] == bits and r["method"] == method and r["error"] is None]
            summary[f"median_kl_bits{bits}_{method}"] = _median_or_none(kls)
    report = Report(experiment="comparison", config=_config_echo(cfg), rows=rows,
                    summary=summary)
    report.wall_clock = time.perf_counter() - start
    return report


def _uniform_grid_for(params: np.ndarray, spacing: float, n: int):
    lo = int(np.floor(params.min() / spacing)) - 1
    hi = int(np.ceil(params.max() / spacing)) + 1
    return explicit_grid(np.arange(lo, hi + 1, dtype=np.float64) * spacing, n=n)


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    if a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def _first_order_trial(args) -> list[dict]:
    cfg, trial = args
    p: FirstOrderParams = cfg.params
    seed = child_seed(cfg.seed, trial)
    teacher = random_model(p.arch, seed=seed)
    batch = sample_sequences(teacher, p.sequences, p.seq_length,
                             seed=child_seed(seed, 0xF0))
    methods = list(p.methods) + (["identity"] if p.include_zero_arm else [])
    rows = []
    for spacing in p.deltas:
        qgrid = _uniform_grid_for(teacher.params, spacing, teacher.params.shape[0])
        for method in methods:
            if method == "rtn":
                rounded = rtn(teacher.params, qgrid)
            elif method == "identity":
                rounded = teacher.params
            else:
                report = dq_optimize(
                    teacher, qgrid,
                    dataclasses.replace(DiscQuantConfig(), iterations=256, warmup=32,
                                        seed=child_seed(seed, 0xD0)))
                rounded = report.quantized
            pairs = first_order_study(teacher, qgrid, rounded, batch)
            for idx, (df, first) in enumerate(pairs):
                rows.append({"seed": seed, "trial": trial, "spacing": spacing,
                             "method": method, "sample": idx,
                             "loss_change": float(df), "first_order": float(first)})
    return rows


def run_first_order(cfg: ExperimentConfig) -> Report:
    """Scatter of actual vs first-order-predicted loss change per sample."""
    if cfg.experiment != "first_order":
        raise ValueError("config is not a first_order experiment")
    start = time.perf_counter()
    p: FirstOrderParams = cfg.params
    chunks = _map_trials(_first_order_trial, [(cfg, t) for t in range(cfg.trials)])
    rows = [row for chunk in chunks for row in chunk]
    rows.sort(key=lambda r: (r["seed"], r["spacing"], r["method"], r["sample"]))
    summary = {}
    methods = list(p.methods) + (["identity"] if p.include_zero_arm else [])
    for spacing in p.deltas:
        for method in methods:
            per_seed_corr, per_seed_slope = [], []
            for trial in range(cfg.trials):
                seed = child_seed(cfg.seed, trial)
                sel = [r for r in rows if r["seed"] == seed
                       and r["spacing"] == spacing and r["method"] == method]
                df = np.array([r["loss_change"] for r in sel])
                fo = np.array([r["first_order"] for r in sel])
                corr = _pearson(df, fo)
                if corr is not None:
                    per_seed_corr.append(corr)
                    per_seed_slope.append(float(np.polyfit(fo, df, 1)[0]))
            key = f"spacing{spacing}_{method}"
            summary[f"median_corr_{key}"] = _median_or_none(per_seed_corr)
            summary[f"median_slope_{key}"] = _median_or_none(per_seed_slope)
    report = Report(experiment="first_order", config=_config_echo(cfg), rows=rows,
                    summary=summary)
    report.wall_clock = time.perf_counter() - start
    return report


def run_scaling(cfg: ExperimentConfig) -> Report:
    """Estimator-error and rounding-generalization slopes against m."""
    if cfg.experiment != "scaling":
        raise ValueError("config is not a scaling experiment")
    start = time.perf_counter()
    p: ScalingParams = cfg.params
    rows, summary = [], {}
    if p.run_estimator:
        for alpha in p.estimator_alphas:
            spec = SpectrumSpec(n=p.estimator_n, alpha=alpha)
            res = falpha_scaling_study(spec, p.estimator_m_grid, p.estimator_trials,
                                       seed=child_seed(cfg.seed, 0xA1))
            for i, m in enumerate(res.m_grid):
                rows.append({"seed": cfg.seed, "study": "estimator", "alpha": alpha,
                             "m": m, "mean_error": float(res.means[i]),
                             "median_error": float(res.medians[i])})
            summary[f"estimator_slope_alpha{alpha}"] = res.slope
            summary[f"estimator_stderr_alpha{alpha}"] = res.stderr
    if p.run_generalization:
        spec = SpectrumSpec(n=p.gen_n, alpha=p.gen_alpha)
        res = generalization_study(spec, p.gen_m_grid, p.gen_trials, p.walk,
                                   seed=child_seed(cfg.seed, 0xA2))
        for i, m in enumerate(res.m_grid):
            rows.append({"seed": cfg.seed, "study": "generalization",
                         "alpha": p.gen_alpha, "m": m,
                         "mean_error": float(res.means[i]),
                         "median_error": float(res.medians[i])})
        summary["generalization_slope"] = res.slope
        summary["generalization_stderr"] = res.stderr
    report = Report(experiment="scaling", config=_config_echo(cfg), rows=rows,
                    summary=summary)
    report.wall_clock = time.perf_counter() - start
    return report


def run_experiment(cfg: ExperimentConfig) -> Report:
    runner = {"comparison": run_comparison, "first_order": run_first_order,
              "scaling": run_scaling}[cfg.experiment]
    return runner(cfg)


def _median_or_none(values) -> float | None:
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def emit(report, fmt: str, path) -> None:
    """Write a report (or an already-parsed record dict) as JSON or CSV.

    JSON output is canonical: emitting a parsed record reproduces the bytes.
    CSV holds the rows only, one line per row plus a header.
    """
    record = report.to_record() if isinstance(report, Report) else report
    if fmt == "json":
        payload = canonical_json(record) + "\n"
        with open(path, "w") as fh:
            fh.write(payload)
    elif fmt == "csv":
        rows = record["rows"]
        columns = list(rows[0].keys()) if rows else []
        buf = io.StringIO()
        buf.write(",".join(columns) + "\n")
        for row in rows:
            buf.write(",".join(_csv_cell(row.get(c)) for c in columns) + "\n")
        with open(path, "w") as fh:
            fh.write(buf.getvalue())
    else:
        raise ValueError(f"unknown format {fmt!r}")


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ";".join(str(v) for v in value)
    return str(value)
