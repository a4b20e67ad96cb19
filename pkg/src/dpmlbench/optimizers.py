"""Private gradient descent: clipping, noising, and the training engine.

One engine (:func:`train`) covers plain DP-SGD and its variants.  Batches are
Poisson-sampled with rate ``q = batch_size / n`` so the subsampled-Gaussian
accounting applies exactly, and updates are normalized by the expected batch
size ``m = q * n``.  With no clip policy and zero noise the engine reduces to
ordinary minibatch SGD on the same sampled batches.

Variants:

* adaptive clipping tracks a quantile of per-example norms with a noisy
  fraction release every step;
* exponential noise decay lowers sigma per epoch;
* ``rgp`` projects dense-layer gradients onto low-rank carriers before
  clipping (see :func:`rgp_reconstruct` for the projection used);
* ``gep`` splits gradients into an embedding in a public-gradient subspace and
  a residual, clipped and noised separately.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .accountant import (PrivacyLedger, PrivacySpec, SubsampledGaussian, calibrate, calibrate_sigma)
from .errors import ConfigError, DomainError, SubspaceError

# ---------------------------------------------------------------------------
# Clipping and noise
# ---------------------------------------------------------------------------


def per_sample_norms(grads: Sequence[np.ndarray]) -> np.ndarray:
    n = grads[0].shape[0]
    sq = np.zeros(n)
    for g in grads:
        sq += (g.reshape(n, -1) ** 2).sum(axis=1)
    return np.sqrt(sq)


def clip_factors(norms: np.ndarray, C: float) -> np.ndarray:
    if not C > 0:
        raise DomainError(f"clip threshold must be positive, got {C}")
    return 1.0 / np.maximum(1.0, norms / C)


def clip_per_sample(grads: Sequence[np.ndarray], C: float) -> list[np.ndarray]:
    """Rescale each example's full gradient to L2 norm at most ``C``."""
    f = clip_factors(per_sample_norms(grads), C)
    return [g * f.reshape((-1,) + (1,) * (g.ndim - 1)) for g in grads]


def privatize_sum(clipped: Sequence[np.ndarray], C: float, sigma: float,
                  rng: np.random.Generator) -> list[np.ndarray]:
    """Sum over examples plus N(0, (C*sigma)^2) per coordinate.

    The caller divides by the (expected) batch size.  No noise is drawn when
    ``sigma == 0``.
    """
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    sums = [g.sum(axis=0) for g in clipped]
    if sigma > 0:
        if not math.isfinite(C):
            raise ConfigError("noise needs a finite clip threshold")
        sums = [s + rng.normal(0.0, C * sigma, s.shape) for s in sums]
    return sums


@dataclass(frozen=True)
class ClipPolicy:
    """Fixed threshold ``C`` or adaptive quantile tracking starting at ``C``.

    ``sigma_b`` is the std of the noise added to the unclipped count; ``None``
    picks a default when the run is calibrated.
    """

    kind: str = "fixed"  # fixed | adaptive
    C: float = 4.0
    gamma: float = 0.7
    eta: float = 0.1
    sigma_b: float | None = None
    c_min: float = 0.05
    c_max: float = 10.0

    def __post_init__(self):
        if self.kind not in ("fixed", "adaptive"):
            raise ConfigError(f"unknown clip policy {self.kind!r}")
        if not self.C > 0:
            raise ConfigError("clip threshold C must be positive")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.kind == "adaptive" and not self.c_min <= self.C <= self.c_max:
            raise ConfigError("need c_min <= C <= c_max")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "constant"  # constant | exp-decay
    sigma: float = 0.0  # sigma for constant, sigma_0 for exp-decay
    k: float = 0.01

    def __post_init__(self):
        if self.kind not in ("constant", "exp-decay"):
            raise ConfigError(f"unknown noise schedule {self.kind!r}")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.kind == "exp-decay" and not self.k > 0:
            raise ConfigError("decay rate k must be positive")

    def sigma_at(self, epoch: int) -> float:
        if self.kind == "constant":
            return self.sigma
        return adpalloc_sigma(self.sigma, self.k, epoch)


def adpclip_update(C_prev: float, b_noisy: float, gamma: float, eta: float,
                   c_min: float = 0.05, c_max: float = 10.0) -> float:
    """Geometric step of the clip threshold toward the ``gamma`` norm quantile."""
    if not C_prev > 0:
        raise DomainError("C_prev must be positive")
    return float(min(max(C_prev * math.exp(-eta * (b_noisy - gamma)), c_min), c_max))


def privatize_fraction(flags, sigma_b: float, rng: np.random.Generator, m: float | None = None) -> float:
    """Noisy fraction of examples whose norm did not exceed the threshold."""
    flags = np.asarray(flags, dtype=float)
    m = len(flags) if m is None else m
    if sigma_b < 0:
        raise DomainError("sigma_b must be >= 0")
    if not m > 0:
        raise DomainError("fraction denominator must be positive")
    total = flags.sum()
    if sigma_b > 0:
        total += rng.normal(0.0, sigma_b)
    return float(total / m)


def adpalloc_sigma(sigma0: float, k: float, t: float) -> float:
    if t < 0:
        raise DomainError("t must be >= 0")
    return sigma0 * math.exp(-k * t)


# ---------------------------------------------------------------------------
# Low-rank carriers
# ---------------------------------------------------------------------------


def _orthonormal_columns(M: np.ndarray, rng: np.random.Generator, tol: float = 1e-10) -> np.ndarray:
    """Orthonormalize columns, replacing dependent ones with fresh random vectors."""
    M = M.copy()
    for _ in range(10):
        Q, R = np.linalg.qr(M)
        d = np.abs(np.diag(R))
        bad = d <= tol * max(d.max(initial=0.0), 1.0)
        if not bad.any():
            return Q
        M[:, bad] = rng.normal(size=(M.shape[0], int(bad.sum())))
    raise SubspaceError("could not build an orthonormal carrier basis")  # pragma: no cover


@dataclass
class RgpState:
    L: np.ndarray  # (rows, rank), orthonormal columns
    R: np.ndarray  # (rank, cols), orthonormal rows

    @property
    def rank(self) -> int:
        return self.L.shape[1]


def rgp_factorize(W: np.ndarray, rank: int, rng: np.random.Generator,
                  direction: np.ndarray | None = None) -> RgpState:
    """Carriers from one power step on ``direction`` (defaults to ``W``)."""
    rows, cols = W.shape
    if not 1 <= rank <= min(rows, cols):
        raise ConfigError(f"rank {rank} outside [1, {min(rows, cols)}]")
    D = W if direction is None else direction
    R0 = rng.normal(size=(rank, cols))
    L = _orthonormal_columns(D @ R0.T, rng)
    R = _orthonormal_columns((L.T @ D).T, rng).T
    return RgpState(L, R)


def rgp_carrier_grads(gW: np.ndarray, state: RgpState) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the carriers of ``W = L R + residual``; works on stacks."""
    return gW @ state.R.T, state.L.T @ gW


def rgp_reconstruct(gL: np.ndarray, gR: np.ndarray, state: RgpState) -> np.ndarray:
    """Map carrier gradients back to a W-shaped update.

    ``gW = L gR + gL R - L (L^T gL) R``.  For exact carrier gradients this is
    ``P_L g + g P_R - P_L g P_R``: the projection onto the span of both
    carriers, so full rank or an in-span gradient is reproduced exactly.  The
    last term removes the component the two products would count twice.
    """
    L, R = state.L, state.R
    return L @ gR + gL @ R - L @ (L.T @ gL) @ R


# ---------------------------------------------------------------------------
# Gradient embedding
# ---------------------------------------------------------------------------


@dataclass
class GepState:
    basis: list[np.ndarray]  # per group, (k, group_dim) orthonormal rows
    slices: list[slice]
    c_embed: float = 4.0
    c_resid: float = 0.8

    @property
    def num_groups(self) -> int:
        return len(self.slices)


def _group_slices(d: int, num_groups: int) -> list[slice]:
    if not 1 <= num_groups <= d:
        raise ConfigError(f"num_groups must lie in [1, {d}]")
    edges = np.linspace(0, d, num_groups + 1).round().astype(int)
    return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def gep_anchor_subspace(public_grads: np.ndarray, num_bases: int, power_iters: int = 2,
                        rng: np.random.Generator | None = None, num_groups: int = 1,
                        c_embed: float = 4.0, c_resid: float | None = None,
                        init: GepState | None = None) -> GepState:
    """Top right-singular subspace of the public gradient matrix per group.

    Block power iteration followed by a Rayleigh-Ritz rotation; ``init``
    warm-starts from an earlier basis.
    """
    G = np.asarray(public_grads, dtype=float)
    if G.ndim != 2:
        raise ConfigError("public gradients must be a (samples, dim) matrix")
    rng = rng or np.random.default_rng(0)
    slices = _group_slices(G.shape[1], num_groups) if init is None else init.slices
    bases = []
    for gi, sl in enumerate(slices):
        Gs = G[:, sl]
        if not np.any(Gs):
            raise SubspaceError(f"public gradients are all zero in group {gi}")
        k = min(num_bases, Gs.shape[1])
        if init is not None and init.basis[gi].shape[0] == k:
            V = init.basis[gi].T.copy()
        else:
            V = rng.normal(size=(Gs.shape[1], k))
        for _ in range(max(1, power_iters)):
            V = _orthonormal_columns(Gs.T @ (Gs @ V), rng)
        # Rayleigh-Ritz: order directions by captured energy.
        _, _, vt = np.linalg.svd(Gs @ V, full_matrices=False)
        basis = (V @ vt.T).T
        bases.append(basis)
    c_resid = c_embed / 5 if c_resid is None else c_resid
    return GepState(bases, list(slices), c_embed, c_resid)


def gep_split(grad: np.ndarray, state: GepState) -> tuple[np.ndarray, np.ndarray]:
    """Embedding coordinates and residual of a flat gradient or a stack of them."""
    grad = np.asarray(grad, dtype=float)
    emb_parts = []
    resid = grad.copy()
    for B, sl in zip(state.basis, state.slices):
        e = grad[..., sl] @ B.T
        emb_parts.append(e)
        resid[..., sl] -= e @ B
    return np.concatenate(emb_parts, axis=-1), resid


def gep_combine(embedding: np.ndarray, residual: np.ndarray, state: GepState) -> np.ndarray:
    out = np.array(residual, dtype=float, copy=True)
    pos = 0
    for B, sl in zip(state.basis, state.slices):
        k = B.shape[0]
        out[..., sl] += embedding[..., pos:pos + k] @ B
        pos += k
    return out


def gep_clip(embedding: np.ndarray, residual: np.ndarray, state: GepState):
    """Per-example clipping of the two parts to their own thresholds."""
    fe = clip_factors(np.linalg.norm(embedding, axis=1), state.c_embed)
    fr = clip_factors(np.linalg.norm(residual, axis=1), state.c_resid)
    return embedding * fe[:, None], residual * fr[:, None]


def gep_privatize(embedding: np.ndarray, residual: np.ndarray, state: GepState, sigma: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Noise the summed parts at their own scales and rebuild a flat gradient."""
    if sigma > 0:
        embedding = embedding + rng.normal(0.0, state.c_embed * sigma, embedding.shape)
        residual = residual + rng.normal(0.0, state.c_resid * sigma, residual.shape)
    return gep_combine(embedding, residual, state)


# ---------------------------------------------------------------------------
# Training engine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DpTrainConfig:
    """Optimizer recipe; ``clip=None`` disables clipping (non-private)."""

    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 50
    loss: nn.LossSpec = nn.LossSpec()
    clip: ClipPolicy | None = ClipPolicy()
    noise: NoiseSchedule = NoiseSchedule()
    method: str = "dpsgd"  # dpsgd | rgp | gep
    rgp_rank: int = 16
    gep_bases: int = 32
    gep_groups: int = 1
    gep_power_iters: int = 2
    gep_resid_ratio: float = 0.2
    gep_public_size: int = 128

    def __post_init__(self):
        if self.method not in ("dpsgd", "rgp", "gep"):
            raise ConfigError(f"unknown method {self.method!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.noise.sigma > 0 and self.clip is None:
            raise ConfigError("noise without clipping has unbounded sensitivity")

    @property
    def private(self) -> bool:
        return self.noise.sigma > 0


def sampling_plan(n: int, batch_size: int, epochs: int) -> tuple[float, int]:
    """Sampling rate and total number of steps for a Poisson-batched run."""
    if n < 1:
        raise ConfigError("empty training set")
    q = min(1.0, batch_size / n)
    steps_per_epoch = max(1, int(round(n / batch_size)))
    return q, steps_per_epoch * epochs


def _events_per_step(cfg: DpTrainConfig) -> int:
    return 2 if cfg.method == "gep" else 1


def calibrate_training(cfg: DpTrainConfig, privacy: PrivacySpec, n: int) -> DpTrainConfig:
    """Fill in the noise scale(s) so the whole run accounts to at most ``privacy``.

    An infinite epsilon returns the config with zero noise.
    """
    if not privacy.is_private:
        return replace(cfg, noise=replace(cfg.noise, sigma=0.0))
    if cfg.clip is None:
        raise ConfigError("a finite budget needs a clip policy")
    q, T = sampling_plan(n, cfg.batch_size, cfg.epochs)
    per = _events_per_step(cfg)
    if cfg.noise.kind == "exp-decay":
        steps_per_epoch = T // cfg.epochs

        def events(s):
            return [SubsampledGaussian(q, s * math.exp(-cfg.noise.k * e), steps_per_epoch * per)
                    for e in range(cfg.epochs)]
    else:
        def events(s):
            return [SubsampledGaussian(q, s, T * per)]

    clip = cfg.clip
    if clip.kind == "adaptive":
        sigma_b = clip.sigma_b
        if sigma_b is None:
            # keep the fraction release well below the gradient release
            base = calibrate(events, privacy)
            sigma_b = max(0.1 * q * n, 2.0 * base)
            clip = replace(clip, sigma_b=sigma_b)
        inner = events

        def events(s):  # noqa: F811
            return inner(s) + [SubsampledGaussian(q, sigma_b, T)]

    sigma = calibrate(events, privacy)
    return replace(cfg, clip=clip, noise=replace(cfg.noise, sigma=sigma))


@dataclass
class StepLog:
    step: int
    epoch: int
    loss: float
    clip: float
    sigma: float
    epsilon: float


@dataclass
class TrainResult:
    params: list[np.ndarray]
    log: list[StepLog] = field(default_factory=list)


def write_train_log(rows: Sequence[StepLog], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "clip_threshold", "sigma", "epsilon"])
        for r in rows:
            w.writerow([r.step, repr(r.loss), repr(r.clip), repr(r.sigma), repr(r.epsilon)])


def poisson_batch(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    return np.flatnonzero(rng.random(n) < q)


def _empty_grads(params):
    return [np.zeros((0,) + p.shape) for p in params]


def _sample_grads(net, params, xb, yb, loss, epoch):
    if len(xb) == 0:
        return np.zeros(0), _empty_grads(params)
    return nn.per_sample_gradients(net, params, xb, yb, loss, epoch)


def dp_sgd_step(net: nn.NetworkSpec, params, xb, yb, *, lr: float, m: float, C: float, sigma: float,
                rng: np.random.Generator, loss: nn.LossSpec = nn.LossSpec(), epoch: int = 0,
                ledger: PrivacyLedger | None = None, q: float | None = None, step: int | None = None):
    """One clipped, noised update on an already sampled batch.

    Returns ``(params', losses, norms)``.  When a ledger is given the step is
    checked against the budget before any computation and recorded after.
    """
    event = SubsampledGaussian(q, sigma) if (ledger is not None and sigma > 0) else None
    if ledger is not None and event is not None:
        ledger.check(event)
    losses, grads = _sample_grads(net, params, xb, yb, loss, epoch)
    norms = per_sample_norms(grads) if len(xb) else np.zeros(0)
    clipped = clip_per_sample(grads, C) if (math.isfinite(C) and len(xb)) else grads
    noisy = privatize_sum(clipped, C, sigma, rng)
    new = nn.sgd_step(params, [g / m for g in noisy], lr)
    if event is not None:
        ledger.record(event, "dp-sgd", step, check=False)
    return new, losses, norms


class _RgpHelper:
    """Carrier bookkeeping for every dense weight of a network."""

    def __init__(self, net, params, rank, rng):
        self.idx = []
        p = 0
        for layer in net.layers:
            shapes = nn._param_shapes(layer)
            if isinstance(layer, nn.Dense):
                self.idx.append(p)
            p += len(shapes)
        self.rank = rank
        self.rng = rng
        self.states: dict[int, RgpState] = {}
        self.history: dict[int, np.ndarray] = {}

    def refresh(self, params):
        for i in self.idx:
            W = params[i]
            r = min(self.rank, *W.shape)
            self.states[i] = rgp_factorize(W, r, self.rng, self.history.get(i))

    def to_carriers(self, grads):
        out = []
        for j, g in enumerate(grads):
            if j in self.states:
                gL, gR = rgp_carrier_grads(g, self.states[j])
                out += [gL, gR]
            else:
                out.append(g)
        return out

    def from_carriers(self, parts):
        out, pos = [], 0
        n_params = len(parts) - len(self.states)
        for j in range(n_params):
            if j in self.states:
                gW = rgp_reconstruct(parts[pos], parts[pos + 1], self.states[j])
                self.history[j] = gW
                out.append(gW)
                pos += 2
            else:
                out.append(parts[pos])
                pos += 1
        return out


def train(net: nn.NetworkSpec, params, x, y, cfg: DpTrainConfig, rng: np.random.Generator,
          ledger: PrivacyLedger | None = None, public_x=None, public_y=None) -> TrainResult:
    """Run the configured optimizer; the noise scale in ``cfg`` must already be set.

    Private runs record every release in ``ledger`` (created if omitted) and
    refuse steps that would exceed its budget.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=int)
    n = len(x)
    q, T = sampling_plan(n, cfg.batch_size, cfg.epochs)
    steps_per_epoch = T // cfg.epochs
    m = q * n
    ledger = ledger if ledger is not None else PrivacyLedger()
    params = [p.copy() for p in params]
    clip = cfg.clip
    C = clip.C if clip is not None else math.inf
    log: list[StepLog] = []

    rgp = _RgpHelper(net, params, cfg.rgp_rank, rng) if cfg.method == "rgp" else None
    gep_state = None
    if cfg.method == "gep":
        if public_x is None or len(public_x) == 0:
            raise ConfigError("gep needs public data for the anchor subspace")
        n_pub = min(cfg.gep_public_size, len(public_x))
        pub_x = np.asarray(public_x, float)[:n_pub]
        pub_y = np.asarray(public_y, int)[:n_pub]

    step = 0
    for epoch in range(cfg.epochs):
        sigma = cfg.noise.sigma_at(epoch)
        if rgp is not None:
            rgp.refresh(params)
        for _ in range(steps_per_epoch):
            idx = poisson_batch(n, q, rng)
            xb, yb = x[idx], y[idx]
            private = sigma > 0
            if cfg.method == "dpsgd":
                params, losses, norms = dp_sgd_step(
                    net, params, xb, yb, lr=cfg.lr, m=m, C=C, sigma=sigma, rng=rng, loss=cfg.loss,
                    epoch=epoch, ledger=ledger if private else None, q=q, step=step)
            else:
                events = [SubsampledGaussian(q, sigma)] * _events_per_step(cfg) if private else []
                if events:
                    ledger.check(SubsampledGaussian(q, sigma, len(events)))
                losses, grads = _sample_grads(net, params, xb, yb, cfg.loss, epoch)
                if cfg.method == "rgp":
                    parts = rgp.to_carriers(grads)
                    norms = per_sample_norms(parts)
                    if math.isfinite(C) and len(xb):
                        parts = clip_per_sample(parts, C)
                    noisy = rgp.from_carriers(privatize_sum(parts, C, sigma, rng))
                else:
                    shapes = [p.shape for p in params]
                    _, pub_grads = nn.per_sample_gradients(net, params, pub_x, pub_y, cfg.loss, epoch)
                    gep_state = gep_anchor_subspace(
                        nn.flatten_params(pub_grads, batch=True), cfg.gep_bases, cfg.gep_power_iters, rng,
                        cfg.gep_groups, C, C * cfg.gep_resid_ratio, init=gep_state)
                    flat = nn.flatten_params(grads, batch=True) if len(xb) else np.zeros((0, sum(
                        int(np.prod(s)) for s in shapes)))
                    emb, res = gep_split(flat, gep_state)
                    norms = np.sqrt((emb**2).sum(1) + (res**2).sum(1))
                    if math.isfinite(C):
                        emb, res = gep_clip(emb, res, gep_state)
                    noisy = nn.unflatten_params(
                        gep_privatize(emb.sum(0), res.sum(0), gep_state, sigma, rng), shapes)
                params = nn.sgd_step(params, [g / m for g in noisy], cfg.lr)
                for ev in events:
                    ledger.record(ev, cfg.method, step, check=False)

            if clip is not None and clip.kind == "adaptive":
                flags = norms <= C
                sigma_b = clip.sigma_b or 0.0
                if private:
                    ledger.record(SubsampledGaussian(q, sigma_b), "clip-fraction", step)
                b = privatize_fraction(flags, sigma_b if private else 0.0, rng, m)
                C = adpclip_update(C, b, clip.gamma, clip.eta, clip.c_min, clip.c_max)
            log.append(StepLog(step, epoch, float(np.mean(losses)) if len(losses) else math.nan,
                               float(C), float(sigma), float(ledger.epsilon())))
            step += 1
    return TrainResult(params, log)


def train_nonprivate(net, params, x, y, cfg: DpTrainConfig, rng) -> list[np.ndarray]:
    """Same sampler and step count as :func:`train`, without clipping or noise."""
    plain = replace(cfg, clip=None, noise=NoiseSchedule(), method="dpsgd")
    return train(net, params, x, y, plain, rng).params
