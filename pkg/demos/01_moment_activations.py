"""Moment activations: what a noisy unit does to the mean and variance of its input.

A Gaussian input N(mu_bar, c_bar) is pushed through a Heaviside or ReLU unit.
The closed-form kernels are compared with brute-force sampling, and then two
units fed by weakly correlated inputs show the linear-response covariance.

    python demos/01_moment_activations.py
"""
import math

import numpy as np

from mnn.activations import ActivationKind, assemble_covariance, ma_moments
from mnn.sde import mc_pair_covariance, mc_scalar_ma

for kind in (ActivationKind.heaviside(), ActivationKind.relu()):
    print(f"\n{kind.tag}: analytic vs 10^6 samples")
    print(f"{'mu_bar':>7} {'c_bar':>6} {'mean':>10} {'mc mean':>10} {'var':>10} {'mc var':>10} {'chi':>8}")
    for seed, (mu, c) in enumerate([(-1.0, 1.0), (0.0, 0.25), (0.0, 1.0), (1.0, 4.0)]):
        a = ma_moments(kind, mu, c)
        e = mc_scalar_ma(kind, mu, c, 10**6, seed=seed)
        print(f"{mu:7.2f} {c:6.2f} {a.mean:10.5f} {e.mean[0]:10.5f} "
              f"{a.variance:10.5f} {e.cov[0, 0]:10.5f} {a.chi:8.4f}")

print("\ncovariance of two Heaviside units with input correlation rho")
kind = ActivationKind.heaviside()
for rho in (0.01, 0.2, 0.6):
    c_bar = np.array([[1.0, rho], [rho, 1.0]])
    linear = assemble_covariance([0.0, 0.0], c_bar, kind)[0, 1]
    exact = math.asin(rho) / (2 * math.pi)  # orthant probability minus 1/4
    mc = mc_pair_covariance(kind, 0.0, 0.0, 1.0, 1.0, rho, 10**6, seed=1)
    print(f"rho={rho:4.2f}  linear response {linear:.5f}  exact {exact:.5f}  sampled {mc.cov:.5f} ± {mc.se:.5f}")
print("linear response is first order in rho: accurate for weak correlations, biased for strong ones")
