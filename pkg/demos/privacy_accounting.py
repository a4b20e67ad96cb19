"""
How much noise does a training run need?
========================================

Walks through the Renyi-DP accountant: the per-step cost of a subsampled
Gaussian release, how costs add up over a run, and the noise multiplier
that a target (epsilon, delta) budget requires.
"""

import numpy as np

from dpmlbench.accountant import (PrivacySpec, SubsampledGaussian, calibrate_sigma, epsilon_of,
                                  rdp_gaussian, rdp_subsampled_gaussian)

# One step: a Gaussian release on a Poisson-sampled batch.  Sampling a
# small fraction q of the data shrinks the Renyi cost a lot at low orders.
sigma = 1.1
full = dict(zip(*rdp_gaussian(sigma).as_arrays()))
sub = dict(zip(*rdp_subsampled_gaussian(0.01, sigma).as_arrays()))
print("order   full batch   q=0.01")
for a in (2.0, 4.0, 8.0, 16.0, 32.0):
    print(f"{a:5.0f}   {full[a]:10.4f}   {sub[a]:.6f}")

# A run is many steps.  RDP composes by adding curves, and the (eps, delta)
# guarantee is read off the best order.
for steps in (100, 1000, 10000):
    eps = epsilon_of([SubsampledGaussian(0.01, sigma, steps)], delta=1e-5)
    print(f"{steps:6d} steps at q=0.01, sigma={sigma}: eps = {eps:.3f}")

# Calibration turns the question around: given a budget, find sigma.
print("\n  eps     sigma   (q=0.05, 500 steps, delta=1e-5)")
for eps in (0.2, 0.5, 1.0, 2.0, 8.0, 100.0):
    s = calibrate_sigma(PrivacySpec(eps), 0.05, 500)
    check = epsilon_of([SubsampledGaussian(0.05, s, 500)])
    print(f"{eps:6.1f}  {s:8.4f}   re-accounted eps {check:.4f}")

# The noise needed grows roughly like 1/eps for small budgets.
eps_grid = np.array([0.25, 0.5, 1.0, 2.0])
sig = np.array([calibrate_sigma(PrivacySpec(e), 0.05, 500) for e in eps_grid])
print("\nsigma * eps:", np.round(sig * eps_grid, 2))
