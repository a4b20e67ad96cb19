"""Label-only privacy: randomized response with a prior, multi-stage training, Laplace soft labels.

Budgets here protect labels only, under the replace-one-label (bounded)
convention.
"""

from __future__ import annotations

import csv
import math

import numpy as np
from scipy.special import logsumexp, softmax

from . import nn
from .errors import ConfigError, DomainError
from .optimizers import DpTrainConfig, train_nonprivate


def _check_prior(prior) -> np.ndarray:
    prior = np.asarray(prior, dtype=float)
    if prior.ndim != 1 or prior.size < 2 or not np.all(np.isfinite(prior)) or np.any(prior < 0):
        raise DomainError("prior must be a finite non-negative vector over >= 2 classes")
    if abs(prior.sum() - 1) > 1e-9:
        raise DomainError(f"prior sums to {prior.sum()}, expected 1")
    return prior


def best_support(prior, epsilon: float) -> np.ndarray:
    """Top-k classes maximizing ``e^eps/(e^eps+k-1) * prior mass of the top k``."""
    prior = _check_prior(prior)
    order = np.argsort(-prior, kind="stable")
    mass = np.cumsum(prior[order])
    k = np.arange(1, len(prior) + 1)
    if math.isinf(epsilon):
        score = mass
    else:
        score = mass / (1 + (k - 1) * math.exp(-epsilon))
    kstar = int(np.argmax(score)) + 1
    return order[:kstar]


def rr_with_prior_distribution(true_label: int, prior, epsilon: float) -> np.ndarray:
    """Output law of prior-restricted randomized response for one true label."""
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    prior = _check_prior(prior)
    support = best_support(prior, epsilon)
    out = np.zeros(len(prior))
    k = len(support)
    if true_label in support:
        if math.isinf(epsilon):
            out[true_label] = 1.0
        else:
            denom = math.exp(epsilon) + k - 1
            out[support] = 1 / denom
            out[true_label] = math.exp(epsilon) / denom
    else:
        out[support] = 1 / k
    return out


def rr_with_prior(true_label: int, prior, epsilon: float, rng: np.random.Generator) -> int:
    dist = rr_with_prior_distribution(true_label, prior, epsilon)
    return int(rng.choice(len(dist), p=dist))


def rr_distribution(true_label: int, k: int, epsilon: float) -> np.ndarray:
    return rr_with_prior_distribution(true_label, np.full(k, 1 / k), epsilon)


def randomized_response(true_label: int, k: int, epsilon: float, rng: np.random.Generator) -> int:
    return rr_with_prior(true_label, np.full(k, 1 / k), epsilon, rng)


def alibi_noise(true_label: int, num_classes: int, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """One-hot label plus Laplace noise of scale ``2/epsilon`` per coordinate."""
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    out = np.zeros(num_classes)
    out[true_label] = 1.0
    if math.isinf(epsilon):
        return out
    return out + rng.laplace(0.0, 2.0 / epsilon, num_classes)


def alibi_posterior(noisy, prior, b: float) -> np.ndarray:
    """Posterior over the true class given a Laplace-noised one-hot vector."""
    noisy = np.asarray(noisy, dtype=float)
    prior = _check_prior(prior)
    k = len(prior)
    if not b > 0:
        raise DomainError("Laplace scale must be positive")
    onehots = np.eye(k)
    loglik = -np.abs(noisy[None, :] - onehots).sum(axis=1) / b
    with np.errstate(divide="ignore"):
        logpost = np.log(prior) + loglik
    return np.exp(logpost - logsumexp(logpost))


# ---------------------------------------------------------------------------
# Training pipelines
# ---------------------------------------------------------------------------


def stage_parts(n: int, stages: int, rng: np.random.Generator) -> list[np.ndarray]:
    if stages < 1:
        raise ConfigError("stages must be >= 1")
    return [np.sort(p) for p in np.array_split(rng.permutation(n), stages)]


def lp_mst_train(x, y, num_classes: int, epsilon: float, stages: int, net: nn.NetworkSpec,
                 cfg: DpTrainConfig, rng: np.random.Generator):
    """Multi-stage training on prior-restricted randomized-response labels.

    Stage 1 labels its part with a uniform prior.  Every later stage takes its
    prior from the model trained on all parts labeled so far.  Each part is
    labeled once, so the whole run is ``epsilon``-label-DP.

    Returns ``(params, noisy_labels)``.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, int)
    parts = stage_parts(len(x), stages, rng)
    for p in parts:
        if len(p) < cfg.batch_size:
            raise ConfigError(f"stage part of {len(p)} samples is smaller than one batch ({cfg.batch_size})")
    noisy = np.full(len(y), -1)
    params = None
    labeled = np.zeros(0, dtype=int)
    for part in parts:
        if params is None:
            priors = np.full((len(part), num_classes), 1 / num_classes)
        else:
            priors = softmax(nn.forward(net, params, x[part]), axis=1)
        for row, i in enumerate(part):
            pr = priors[row] / priors[row].sum()
            noisy[i] = rr_with_prior(int(y[i]), pr, epsilon, rng)
        labeled = np.concatenate([labeled, part])
        params = train_nonprivate(net, nn.init_params(net, rng), x[labeled], noisy[labeled], cfg, rng)
    return params, noisy


def alibi_labels(y, num_classes: int, epsilon: float, rng: np.random.Generator):
    """Noisy soft labels and their MAP hard labels.

    The prior is the class frequency estimated from the noisy vectors
    themselves (clipped at a small floor), so it costs no extra budget.
    """
    y = np.asarray(y, int)
    soft = np.array([alibi_noise(int(t), num_classes, epsilon, rng) for t in y])
    prior = np.clip(soft.mean(axis=0), 1e-3, None)
    prior /= prior.sum()
    b = 2.0 / epsilon if math.isfinite(epsilon) else 1e-12
    post = np.array([alibi_posterior(s, prior, b) for s in soft])
    return soft, post.argmax(axis=1)


def alibi_train(x, y, num_classes: int, epsilon: float, net: nn.NetworkSpec, cfg: DpTrainConfig,
                rng: np.random.Generator):
    _, hard = alibi_labels(y, num_classes, epsilon, rng)
    params = train_nonprivate(net, nn.init_params(net, rng), x, hard, cfg, rng)
    return params, hard


def write_noisy_labels(path, labels, noisy, mechanism: str, epsilon: float) -> None:
    """Original and released labels side by side with a provenance column."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "noisy_label", "provenance"])
        for i, (a, b) in enumerate(zip(labels, noisy)):
            w.writerow([i, int(a), int(b), f"{mechanism}:eps={epsilon!r}"])
