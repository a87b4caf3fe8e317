"""Monomer-count fluctuations and their Gaussian limit.

The scaled deviation (1[x=1], Z_t - mu_t) / sqrt(h) is sampled and its
variance compared with the limit 2 * int_0^t Pi ds.  A coarse text
histogram shows the shape against the matching normal density.

    python demos/03_gaussian_fluctuations.py
"""
import math
from dataclasses import replace

import numpy as np

from coagclt import harness as hz
from coagclt.kernel import KernelSpec
from coagclt.measure import Grid, GridFunction

grid = Grid(1.0, 60)
cfg = hz.EnsembleConfig(
    spec=KernelSpec.constant_kernel(1.0), grid=grid, h=1 / 1000, times=(0.5,),
    functionals={"n1": GridFunction.indicator(grid, 1.0)}, R=5000, seed=3,
)
rep = hz.clt_gaussianity(cfg, "n1", 0.5)
print(f"sample variance {rep['sample_variance']:.4f}   limit {rep['ou_variance']:.4f}   "
      f"ratio {rep['variance_ratio']:.3f}")
print(f"skewness {rep['skewness']:+.3f}   excess kurtosis {rep['excess_kurtosis']:+.3f}")

st = hz.run_ensemble(replace(cfg, centred=True, keep_samples=True))
x = st.samples[:, 0, 0]
sd = math.sqrt(rep["ou_variance"])
edges = np.linspace(-3 * sd, 3 * sd, 13)
counts, _ = np.histogram(x, edges)
width = edges[1] - edges[0]
print()
for lo, c in zip(edges[:-1], counts):
    mid = lo + width / 2
    expect = x.size * width * math.exp(-mid * mid / (2 * sd * sd)) / (sd * math.sqrt(2 * math.pi))
    print(f"{mid:+7.3f} {'#' * int(60 * c / x.size * 3):<40s} {c:5d} (normal {expect:7.1f})")
