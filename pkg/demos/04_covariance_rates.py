"""Covariance-estimator error rates under power-law spectra.

With eigenvalues lam1 / k^alpha, the Schatten-1 error of the plug-in
covariance estimator decays like m^(1-alpha) for shallow decay (alpha < 3/2,
while m << n) and like 1/sqrt(m) for fast decay (alpha > 3/2).
"""

import numpy as np

from discq import SpectrumSpec, falpha_scaling_study, generalization_study
from discq.lmwalk import WalkConfig

print("fast decay, alpha = 2.5 (expect slope near -0.5):")
res = falpha_scaling_study(SpectrumSpec(n=256, alpha=2.5),
                           (32, 64, 128, 256, 512), trials=20, seed=0)
print(f"  slope = {res.slope:.3f} +/- {res.stderr:.3f}, "
      f"mean errors {np.round(res.means, 3)}")

print("\nshallow decay, alpha = 1.25 with m << n (expect slope near -0.25):")
res = falpha_scaling_study(SpectrumSpec(n=1024, alpha=1.25),
                           (8, 16, 32, 64), trials=20, seed=0)
print(f"  slope = {res.slope:.3f} +/- {res.stderr:.3f}")

print("\nshallow decay with the m grid pushed past n (the rate transitions "
      "to -0.5):")
res = falpha_scaling_study(SpectrumSpec(n=256, alpha=1.25),
                           (64, 128, 256, 512), trials=20, seed=0)
print(f"  slope = {res.slope:.3f} +/- {res.stderr:.3f}")

print("\nrounding generalization: error of the walk's output against the true")
print("covariance shrinks as more constraint samples are used (alpha = 2):")
res = generalization_study(SpectrumSpec(n=1024, alpha=2.0), (8, 16, 32, 64),
                           trials=10, walk_cfg=WalkConfig(delta=0.04), seed=1)
for m, med in zip(res.m_grid, res.medians):
    print(f"  m = {m:3d}: median (x-y)^T Sigma (x-y) = {med:.5f}")
print(f"  fitted slope = {res.slope:.2f}")
