"""Teacher ensembles and private nearest-neighbour voting.

Both mechanisms answer label queries on public inputs with a noisy vote
histogram.  Vote noise is Gaussian so releases compose in the same RDP
ledger as the gradient-based methods; one record moves at most one vote from
one class to another, an L2 change of sqrt(2).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn
from .accountant import Gaussian, PrivacyLedger, PrivacySpec, SubsampledGaussian, calibrate
from .errors import AbstainError, ConfigError, DomainError
from .optimizers import DpTrainConfig, train_nonprivate

VOTE_SENSITIVITY = math.sqrt(2.0)


def partition_private(n: int, n_teachers: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Disjoint shards of ``range(n)`` whose sizes differ by at most one."""
    if n_teachers < 1:
        raise ConfigError("need at least one teacher")
    if n_teachers > n:
        raise ConfigError(f"{n_teachers} teachers but only {n} private samples")
    return [np.sort(s) for s in np.array_split(rng.permutation(n), n_teachers)]


def noisy_aggregate(votes, sigma: float, rng: np.random.Generator,
                    ledger: PrivacyLedger | None = None, step: int | None = None) -> int:
    """Noisy plurality; ties go to the lowest class index."""
    votes = np.asarray(votes, dtype=float)
    if votes.ndim != 1 or votes.size == 0:
        raise DomainError("vote histogram must be a non-empty vector")
    if sigma < 0:
        raise DomainError("sigma must be >= 0")
    if ledger is not None:
        ledger.record(Gaussian(sigma, VOTE_SENSITIVITY) if sigma > 0 else None, "vote", step)
    if sigma > 0:
        votes = votes + rng.normal(0.0, sigma, votes.shape)
    return int(np.argmax(votes))


def vote_histograms(predictions: np.ndarray, num_classes: int) -> np.ndarray:
    """``predictions`` is (voters, queries) of class ids; returns (queries, classes)."""
    predictions = np.asarray(predictions, dtype=int)
    out = np.zeros((predictions.shape[1], num_classes), dtype=int)
    for row in predictions:
        out[np.arange(len(row)), row] += 1
    return out


@dataclass
class TeacherEnsemble:
    net: nn.NetworkSpec
    teachers: list[list[np.ndarray]]
    shards: list[np.ndarray]

    @property
    def n_teachers(self) -> int:
        return len(self.teachers)

    def votes(self, x) -> np.ndarray:
        preds = np.array([nn.forward(self.net, p, x).argmax(axis=1) for p in self.teachers])
        return vote_histograms(preds, self.net.num_classes)


def train_teachers(x, y, n_teachers: int, net: nn.NetworkSpec, cfg: DpTrainConfig,
                   rng: np.random.Generator) -> TeacherEnsemble:
    shards = partition_private(len(x), n_teachers, rng)
    x = np.asarray(x, float)
    y = np.asarray(y, int)
    teachers = []
    for s in shards:
        p0 = nn.init_params(net, rng)
        teachers.append(train_nonprivate(net, p0, x[s], y[s], cfg, rng))
    return TeacherEnsemble(net, teachers, shards)


@dataclass
class LabeledPublic:
    """Public points with assigned labels; unqueried points carry label -1."""

    index: np.ndarray
    label: np.ndarray
    was_query: np.ndarray

    @property
    def queried(self) -> np.ndarray:
        return self.index[self.was_query]

    @property
    def queried_labels(self) -> np.ndarray:
        return self.label[self.was_query]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "label", "was_query"])
            for i, lab, q in zip(self.index, self.label, self.was_query):
                w.writerow([int(i), int(lab) if q else "", int(bool(q))])


def calibrate_pate(privacy: PrivacySpec, queries: int) -> float:
    """Absolute vote-noise std for ``queries`` Gaussian releases."""
    if not privacy.is_private:
        return 0.0
    return calibrate(lambda s: [Gaussian(s, VOTE_SENSITIVITY, queries)], privacy, hi=1e6)


def pate_label_public(ensemble: TeacherEnsemble, public_x, sigma: float, max_queries: int,
                      ledger: PrivacyLedger, rng: np.random.Generator) -> LabeledPublic:
    """Label the first ``min(max_queries, |public|)`` public points by noisy vote.

    The full query budget is checked against the ledger before any vote is
    released.
    """
    public_x = np.asarray(public_x, float)
    n = len(public_x)
    nq = min(max_queries, n)
    if nq < 1:
        raise ConfigError("need at least one query")
    ledger.check(Gaussian(sigma, VOTE_SENSITIVITY, nq) if sigma > 0 else None)
    hist = ensemble.votes(public_x[:nq])
    labels = np.full(n, -1)
    for i in range(nq):
        labels[i] = noisy_aggregate(hist[i], sigma, rng, ledger, i)
    was = np.zeros(n, dtype=bool)
    was[:nq] = True
    return LabeledPublic(np.arange(n), labels, was)


def privknn_predict(private_feats, private_y, query_feat, k: int, sample_prob: float, sigma: float,
                    rng: np.random.Generator, ledger: PrivacyLedger | None = None, num_classes: int | None = None,
                    step: int | None = None) -> int:
    """Noisy vote of the ``k`` nearest points of a Poisson subsample.

    ``sigma`` is the absolute vote-noise std; the ledger sees a subsampled
    Gaussian with noise multiplier ``sigma / sqrt(2)``.
    """
    private_feats = np.asarray(private_feats, float)
    private_y = np.asarray(private_y, int)
    num_classes = num_classes or int(private_y.max()) + 1
    if k < 1:
        raise ConfigError("k must be >= 1")
    event = SubsampledGaussian(sample_prob, sigma / VOTE_SENSITIVITY) if sigma > 0 else None
    if ledger is not None:
        ledger.check(event)
    for _ in range(2):
        sub = np.flatnonzero(rng.random(len(private_y)) < sample_prob)
        if len(sub) >= k:
            break
    else:
        raise AbstainError(f"subsample smaller than k={k} twice in a row")
    d = np.sum((private_feats[sub] - np.asarray(query_feat, float)) ** 2, axis=1)
    nearest = sub[np.argsort(d, kind="stable")[:k]]
    votes = np.bincount(private_y[nearest], minlength=num_classes)
    if ledger is not None:
        ledger.record(event, "knn-vote", step, check=False)
    return noisy_aggregate(votes, sigma, rng)


def calibrate_privknn(privacy: PrivacySpec, queries: int, sample_prob: float) -> float:
    if not privacy.is_private:
        return 0.0
    mult = calibrate(lambda s: [SubsampledGaussian(sample_prob, s, queries)], privacy)
    return mult * VOTE_SENSITIVITY


def privknn_label_public(private_x, private_y, public_x, k: int, sample_prob: float, sigma: float,
                         max_queries: int, ledger: PrivacyLedger, rng: np.random.Generator,
                         feature_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                         num_classes: int | None = None) -> LabeledPublic:
    feature_fn = feature_fn or (lambda a: np.asarray(a, float).reshape(len(a), -1))
    pf = feature_fn(np.asarray(private_x, float))
    public_x = np.asarray(public_x, float)
    n = len(public_x)
    nq = min(max_queries, n)
    ledger.check(SubsampledGaussian(sample_prob, sigma / VOTE_SENSITIVITY, nq) if sigma > 0 else None)
    qf = feature_fn(public_x[:nq])
    labels = np.full(n, -1)
    for i in range(nq):
        labels[i] = privknn_predict(pf, private_y, qf[i], k, sample_prob, sigma, rng, ledger, num_classes, i)
    was = np.zeros(n, dtype=bool)
    was[:nq] = True
    return LabeledPublic(np.arange(n), labels, was)


def train_student(labeled_x, labeled_y, net: nn.NetworkSpec, cfg: DpTrainConfig,
                  rng: np.random.Generator) -> list[np.ndarray]:
    """Ordinary supervised training on labeled public data (post-processing)."""
    labeled_x = np.asarray(labeled_x, float)
    if len(labeled_x) == 0:
        raise ConfigError("student needs a non-empty labeled set")
    return train_nonprivate(net, nn.init_params(net, rng), labeled_x, labeled_y, cfg, rng)
