"""Head-to-head: nearest rounding, data-dependent projected-SGD rounding,
and the constrained walk, on seeded toy teachers.

The projected-SGD rounder minimizes a vertex-steering linear term plus the
distillation KL to the original model, clamps x to the hypercube after every
step, and snaps the few leftover fractional coordinates at the end.
"""

import numpy as np

from discq import DiscQuantConfig, quantize_model, random_model, sample_sequences

bits, groupsize, seeds = 3, 16, range(4)
rows = {"rtn": [], "discquant": [], "lmwalk": []}
for seed in seeds:
    teacher = random_model(seed=seed)
    heldout = sample_sequences(teacher, 256, seed=seed + 1000)
    for method in rows:
        out = quantize_model(teacher, bits, groupsize, method, seed=seed,
                             heldout=heldout)
        rows[method].append(out.heldout_kl)

print(f"{bits}-bit block scaling, groupsize {groupsize}, "
      f"{out.bits_per_param} bits/parameter")
print(f"held-out KL to the original model, {len(list(seeds))} seeds:\n")
for method, kls in rows.items():
    print(f"  {method:10s} median {np.median(kls):.4f}   per-seed "
          f"{np.round(kls, 4)}")

print("\nthe huge-lambda limit of the linear-term objective IS nearest rounding:")
teacher = random_model(seed=0)
cfg = DiscQuantConfig(lam=2e8, lambda_on="linear", iterations=256, warmup=32)
out = quantize_model(teacher, bits, groupsize, "discquant", seed=0, dq_cfg=cfg)
base = quantize_model(teacher, bits, groupsize, "rtn", seed=0)
print("  bit-identical to rtn:", np.array_equal(out.model.params, base.model.params))
