"""
Protecting only the labels
==========================

Label-DP mechanisms perturb labels and leave features untouched.  This
script compares plain randomized response, randomized response restricted
to a prior's top classes, and Laplace soft labels with a Bayesian decode.
"""

import numpy as np

from dpmlbench import nn
from dpmlbench.data import synth_blobs
from dpmlbench.labeldp import (alibi_labels, best_support, lp_mst_train, randomized_response,
                               rr_with_prior_distribution)
from dpmlbench.optimizers import DpTrainConfig

rng = np.random.default_rng(0)
ds = synth_blobs(400, 5, 10, 4.0, seed=1)

# With a confident prior, the mechanism only ever answers within the top
# few classes and spends its budget telling those apart.
prior = np.array([0.6, 0.25, 0.1, 0.04, 0.01])
for eps in (0.5, 1.0, 3.0):
    keep = best_support(prior, eps)
    print(f"eps={eps}: support {sorted(keep.tolist())}, "
          f"P(output=true | y=0) = {rr_with_prior_distribution(0, prior, eps)[0]:.3f}")

print(f"\n{'eps':>5}  {'RR kept':>8}  {'ALIBI kept':>10}")
for eps in (0.5, 1.0, 2.0, 4.0):
    rr = np.array([randomized_response(int(t), 5, eps, rng) for t in ds.y])
    _, ali = alibi_labels(ds.y, 5, eps, rng)
    print(f"{eps:5.1f}  {np.mean(rr == ds.y):8.3f}  {np.mean(ali == ds.y):10.3f}")

# Multi-stage training feeds each stage's model back in as the prior for
# the next part of the data.
net = nn.mlp(10, [32], 5)
cfg = DpTrainConfig(lr=0.3, epochs=10, batch_size=50)
for stages in (1, 2, 3):
    params, noisy = lp_mst_train(ds.x, ds.y, 5, 1.0, stages, net, cfg, np.random.default_rng(stages))
    print(f"{stages} stage(s) at eps=1: labels kept {np.mean(noisy == ds.y):.3f}, "
          f"model accuracy {nn.accuracy(net, params, ds.x, ds.y):.3f}")
