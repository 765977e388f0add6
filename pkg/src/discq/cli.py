"""Command line entry point: experiments, single walks, spectrum studies,
and whole-model quantization over toy checkpoints."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .discquant import DiscQuantConfig
from .harness import ExperimentConfig, Report, emit, run_experiment
from .incoherence import ModelIncoherence
from .lmwalk import ConstraintSet, WalkConfig, lm_round
from .pipeline import quantize_model
from .serialize import canonical_json, floats_to_hex
from .speclab import (SpectrumSpec, falpha_scaling_study, generalization_study,
                      jl_spectrum)
from .toymodel import (ToyArch, gradient_rows, load_checkpoint, random_model,
                       sample_sequences, save_checkpoint)


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


def _cmd_run(args) -> int:
    with open(args.config) as fh:
        cfg = ExperimentConfig.from_dict(json.load(fh))
    report = run_experiment(cfg)
    outdir = args.out or cfg.outdir
    for fmt in args.format.split(","):
        out = f"{outdir}/{cfg.experiment}.{fmt}" if outdir else f"{cfg.experiment}.{fmt}"
        emit(report, fmt, out)
        print(f"wrote {out}")
    failures = report.failed_rows
    if failures:
        print(f"{len(failures)} trial rows failed", file=sys.stderr)
        return 1
    return 0


def _cmd_walk(args) -> int:
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0x11]))
    matrix = rng.standard_normal((args.m, args.n))
    y = rng.random(args.n)
    cfg = WalkConfig(delta=args.delta, eps=args.eps, steps_per_phase=args.steps,
                     max_phases=args.max_phases, seed=args.seed)
    result = lm_round(ConstraintSet(matrix, y), cfg)
    record = {
        "n": args.n, "m": args.m, "seed": args.seed,
        "fractional": result.fractional,
        "phases": result.phases,
        "accepted_freeze_counts": result.accepted_freeze_counts,
        "residual_l2": result.residual_l2,
        "residual_inf": ConstraintSet(matrix, y).residual(result.x),
        "frozen": [bool(b) for b in result.frozen],
        "x": floats_to_hex(result.x),
    }
    with open(args.out, "w") as fh:
        fh.write(canonical_json(record) + "\n")
    print(f"wrote {args.out} (fractional={result.fractional}, phases={result.phases})")
    return 0


def _write_csv(path, columns, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _cmd_speclab(args) -> int:
    if args.study == "falpha":
        spec = SpectrumSpec(n=args.n, alpha=args.alpha)
        res = falpha_scaling_study(spec, _int_list(args.m_grid), args.trials, seed=args.seed)
        rows = [(args.seed, args.alpha, m, float(res.means[i]), float(res.medians[i]))
                for i, m in enumerate(res.m_grid)]
        _write_csv(args.out, ["seed", "alpha", "m", "mean_error", "median_error"], rows)
        print(f"slope={res.slope:.4f} stderr={res.stderr:.4f} -> {args.out}")
    elif args.study == "gen":
        spec = SpectrumSpec(n=args.n, alpha=args.alpha)
        cfg = WalkConfig(delta=args.delta, seed=args.seed)
        res = generalization_study(spec, _int_list(args.m_grid), args.trials, cfg,
                                   seed=args.seed)
        rows = [(args.seed, args.alpha, m, float(res.means[i]), float(res.medians[i]))
                for i, m in enumerate(res.m_grid)]
        _write_csv(args.out, ["seed", "alpha", "m", "mean_quad", "median_quad"], rows)
        print(f"slope={res.slope:.4f} stderr={res.stderr:.4f} -> {args.out}")
    else:  # jl
        model = load_checkpoint(args.ckpt)
        batch = sample_sequences(model, args.samples, seed=args.seed)
        grads = gradient_rows(model, batch)
        evals = jl_spectrum(grads, d=args.d, seed=args.seed)
        rows = [(args.seed, k + 1, float(v)) for k, v in enumerate(evals)]
        _write_csv(args.out, ["seed", "rank", "eigenvalue"], rows)
        print(f"wrote {args.out} ({len(rows)} eigenvalues)")
    return 0


def _cmd_quantize(args) -> int:
    if args.teacher:
        teacher = load_checkpoint(args.teacher)
    else:
        teacher = random_model(ToyArch(), seed=args.seed)
    transform = None
    if args.incoherence == "on":
        transform = ModelIncoherence(teacher.arch, seed=args.incoh_seed)
    dq_cfg = DiscQuantConfig(lam=args.lam, lr=args.lr, iterations=args.iters,
                             warmup=args.warmup, clamp=args.clamp, seed=args.seed)
    heldout = sample_sequences(teacher, args.heldout, seed=args.seed + 1)
    outcome = quantize_model(teacher, args.bits, args.groupsize, args.method,
                             seed=args.seed, transform=transform, dq_cfg=dq_cfg,
                             heldout=heldout)
    record = {
        "method": args.method,
        "bits": args.bits,
        "groupsize": args.groupsize if args.groupsize else "per-tensor",
        "bits_per_param": outcome.bits_per_param,
        "incoherence": args.incoherence,
        "fractional": outcome.fractional,
        "heldout_kl": outcome.heldout_kl,
        "flags": list(outcome.flags),
        "params": floats_to_hex(outcome.model.params),
    }
    with open(args.out, "w") as fh:
        fh.write(canonical_json(record) + "\n")
    print(f"wrote {args.out} (held-out KL {outcome.heldout_kl:.6f})")
    return 0


def _cmd_teacher(args) -> int:
    arch = ToyArch(vocab=args.vocab, context=args.context, hidden=args.hidden,
                   layers=args.layers, emb=args.emb)
    save_checkpoint(random_model(arch, seed=args.seed), args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dq", description=__doc__)
    parser.add_argument("--version", action="version", version=f"dq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output directory (default: cwd)")
    p.add_argument("--format", default="json", help="comma-separated: json,csv")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("walk", help="round a random constrained instance")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=0.02)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--max-phases", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_walk)

    p = sub.add_parser("speclab", help="spectrum studies")
    ssub = p.add_subparsers(dest="study", required=True)
    q = ssub.add_parser("falpha", help="covariance estimator error rate")
    q.add_argument("--alpha", type=float, required=True)
    q.add_argument("--n", type=int, default=256)
    q.add_argument("--m-grid", default="32,64,128,256,512")
    q.add_argument("--trials", type=int, default=24)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=_cmd_speclab)
    q = ssub.add_parser("gen", help="rounding generalization scaling")
    q.add_argument("--alpha", type=float, required=True)
    q.add_argument("--n", type=int, default=1024)
    q.add_argument("--m-grid", default="8,16,32,64")
    q.add_argument("--trials", type=int, default=20)
    q.add_argument("--delta", type=float, default=0.04)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=_cmd_speclab)
    q = ssub.add_parser("jl", help="projected gradient spectrum of a checkpoint")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--d", type=int, default=64)
    q.add_argument("--samples", type=int, default=128)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=_cmd_speclab)

    p = sub.add_parser("quantize", help="quantize a toy checkpoint")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--groupsize", type=int, default=None)
    p.add_argument("--method", choices=("rtn", "discquant", "lmwalk"), default="discquant")
    p.add_argument("--lambda", dest="lam", type=float, default=200.0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=1024)
    p.add_argument("--warmup", type=int, default=128)
    p.add_argument("--clamp", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--teacher", default=None, help="checkpoint path (default: seeded)")
    p.add_argument("--heldout", type=int, default=256)
    p.add_argument("--incoherence", choices=("on", "off"), default="off")
    p.add_argument("--incoh-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_quantize)

    p = sub.add_parser("teacher", help="write a seeded teacher checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--context", type=int, default=4)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--emb", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_teacher)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
