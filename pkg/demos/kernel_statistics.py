"""Check the variance law for kernel superposition outputs.

With layer-normalized tokens and weights drawn from N(0, sigma_w^2), the
output variance of a single superposition term is predicted from the mean
and variance of the kernel. This script compares the prediction with a
Monte Carlo estimate for the linear and Gaussian kernels.

Run: python3 demos/kernel_statistics.py
"""

from superkernel.attention import variance_probe
from superkernel.kernels import KernelSpec

for label, spec, d_head in (("linear", KernelSpec.linear(), 8), ("gaussian", KernelSpec.gaussian(1.0), 4)):
    rep = variance_probe(spec, d_head, sigma_w=0.1, trials=100_000, seed=0)
    print(f"{label:8s} d_head={d_head}: empirical {rep.empirical_var:.3e}, predicted {rep.predicted_var:.3e}, "
          f"ratio {rep.ratio:.4f}")
