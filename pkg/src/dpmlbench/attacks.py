"""Membership inference: shadow training, attack features, attack model, AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, softmax
from scipy.stats import rankdata

from . import nn
from .errors import ConfigError, DomainError

MODES = ("black", "white")


def auc(scores, labels) -> float:
    """P(score of a positive > score of a negative) + P(tie) / 2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("auc needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------


@dataclass
class AttackFeatures:
    """Branch inputs for the attack model, one (n, width) block per branch."""

    mode: str
    blocks: list[np.ndarray]

    def __len__(self):
        return len(self.blocks[0])

    def concat(self, other: "AttackFeatures") -> "AttackFeatures":
        if other.mode != self.mode:
            raise ConfigError("cannot mix black- and white-box features")
        return AttackFeatures(self.mode, [np.concatenate([a, b]) for a, b in zip(self.blocks, other.blocks)])


def last_layer_gradients(net: nn.NetworkSpec, params, x, y) -> np.ndarray:
    """Per-example cross-entropy gradient w.r.t. the final dense layer, flattened (W then b)."""
    h = nn.hidden_features(net, params, x)
    logits = h @ params[-2] + params[-1]
    d = softmax(logits, axis=1)
    y = np.asarray(y, int)
    d[np.arange(len(y)), y] -= 1
    gW = h[:, :, None] * d[:, None, :]
    return np.concatenate([gW.reshape(len(y), -1), d], axis=1)


def build_features(net: nn.NetworkSpec, params, x, y, mode: str = "black") -> AttackFeatures:
    """Black-box: sorted posteriors and correctness bit.  White-box: posteriors,
    loss, last-layer gradient and one-hot label."""
    if mode not in MODES:
        raise ConfigError(f"unknown attack mode {mode!r}")
    y = np.asarray(y, int)
    logits = nn.forward(net, params, x)
    post = softmax(logits, axis=1)
    if mode == "black":
        sorted_post = -np.sort(-post, axis=1)
        correct = (post.argmax(axis=1) == y).astype(float)[:, None]
        return AttackFeatures(mode, [sorted_post, correct])
    n, k = post.shape
    loss = -np.log(np.clip(post[np.arange(n), y], 1e-300, None))[:, None]
    onehot = np.eye(k)[y]
    return AttackFeatures(mode, [post, loss, last_layer_gradients(net, params, x, y), onehot])


# ---------------------------------------------------------------------------
# Attack model
# ---------------------------------------------------------------------------


@dataclass
class AttackConfig:
    branch_width: int = 64
    head_width: int = 64
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64


@dataclass
class Attacker:
    """Per-branch ReLU layers, concatenated into a ReLU head and a sigmoid output."""

    mode: str
    params: dict[str, list[np.ndarray]]
    means: list[np.ndarray]
    stds: list[np.ndarray]
    config: AttackConfig = field(default_factory=AttackConfig)

    def _standardize(self, feats: AttackFeatures):
        return [(b - m) / s for b, m, s in zip(feats.blocks, self.means, self.stds)]

    def score(self, feats: AttackFeatures) -> np.ndarray:
        if feats.mode != self.mode:
            raise ConfigError(f"attacker trained for {self.mode}-box features")
        return expit(_forward(self.params, self._standardize(feats))[0][:, 0])


def _init_attack(widths, cfg: AttackConfig, rng):
    def dense(i, o):
        bound = 1 / np.sqrt(i)
        return [rng.uniform(-bound, bound, (i, o)), rng.uniform(-bound, bound, o)]

    branches = [dense(w, cfg.branch_width) for w in widths]
    head = dense(cfg.branch_width * len(widths), cfg.head_width) + dense(cfg.head_width, 1)
    return {"branches": [p for b in branches for p in b], "head": head}


def _forward(params, blocks):
    br = params["branches"]
    hs, pres = [], []
    for j, x in enumerate(blocks):
        z = x @ br[2 * j] + br[2 * j + 1]
        pres.append(z)
        hs.append(np.maximum(z, 0))
    cat = np.concatenate(hs, axis=1)
    W1, b1, W2, b2 = params["head"]
    z1 = cat @ W1 + b1
    a1 = np.maximum(z1, 0)
    out = a1 @ W2 + b2
    return out, (blocks, pres, cat, z1, a1)


def _backward(params, cache, dout):
    blocks, pres, cat, z1, a1 = cache
    W1, b1, W2, b2 = params["head"]
    gW2 = a1.T @ dout
    gb2 = dout.sum(axis=0)
    da1 = dout @ W2.T * (z1 > 0)
    gW1 = cat.T @ da1
    gb1 = da1.sum(axis=0)
    dcat = da1 @ W1.T
    width = pres[0].shape[1]
    gbr = []
    for j, (x, z) in enumerate(zip(blocks, pres)):
        dz = dcat[:, j * width:(j + 1) * width] * (z > 0)
        gbr += [x.T @ dz, dz.sum(axis=0)]
    return {"branches": gbr, "head": [gW1, gb1, gW2, gb2]}


def train_attack(feats: AttackFeatures, is_member, rng: np.random.Generator,
                 cfg: AttackConfig | None = None) -> Attacker:
    """Adam on binary cross-entropy over standardized branch inputs."""
    cfg = cfg or AttackConfig()
    y = np.asarray(is_member, dtype=float)
    if len(np.unique(y)) < 2:
        raise DomainError("attack training needs both members and non-members")
    means = [b.mean(axis=0) for b in feats.blocks]
    stds = [np.where(b.std(axis=0) > 1e-8, b.std(axis=0), 1.0) for b in feats.blocks]
    params = _init_attack([b.shape[1] for b in feats.blocks], cfg, rng)
    att = Attacker(feats.mode, params, means, stds, cfg)
    blocks = att._standardize(feats)
    keys = [(k, i) for k in ("branches", "head") for i in range(len(params[k]))]
    m = {key: np.zeros_like(params[key[0]][key[1]]) for key in keys}
    v = {key: np.zeros_like(params[key[0]][key[1]]) for key in keys}
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    n = len(y)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            out, cache = _forward(params, [b[idx] for b in blocks])
            dout = (expit(out[:, 0]) - y[idx])[:, None] / len(idx)
            grads = _backward(params, cache, dout)
            t += 1
            for key in keys:
                g = grads[key[0]][key[1]]
                m[key] = b1 * m[key] + (1 - b1) * g
                v[key] = b2 * v[key] + (1 - b2) * g * g
                mh = m[key] / (1 - b1**t)
                vh = v[key] / (1 - b2**t)
                params[key[0]][key[1]] = params[key[0]][key[1]] - cfg.lr * mh / (np.sqrt(vh) + eps)
    return att


# ---------------------------------------------------------------------------
# Pipeline pieces
# ---------------------------------------------------------------------------


def train_shadow(x, y, plan, train_fn: Callable[[np.ndarray, np.ndarray], list]):
    """Train the shadow model on ``plan.shadow_train`` only."""
    idx = plan.shadow_train
    return train_fn(np.asarray(x)[idx], np.asarray(y)[idx])


def membership_features(net, params, x, y, members, nonmembers, mode):
    x = np.asarray(x)
    y = np.asarray(y)
    f_in = build_features(net, params, x[members], y[members], mode)
    f_out = build_features(net, params, x[nonmembers], y[nonmembers], mode)
    labels = np.concatenate([np.ones(len(members)), np.zeros(len(nonmembers))])
    return f_in.concat(f_out), labels


def evaluate_attack(attacker: Attacker, net, params, x, y, members, nonmembers):
    """Raw AUC of the attacker on a target model; members are the positives.

    Returns ``(auc, scores, labels)``.
    """
    feats, labels = membership_features(net, params, x, y, members, nonmembers, attacker.mode)
    scores = attacker.score(feats)
    return auc(scores, labels), scores, labels


def write_attack_records(path, scores, is_member, mode: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["score", "is_member", "mode"])
        for s, m in zip(scores, is_member):
            w.writerow([repr(float(s)), int(m), mode])
