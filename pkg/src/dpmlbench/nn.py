"""Small feed-forward networks in numpy with exact per-example gradients.

Every layer processes the batch independently per example (there is no
batch normalization), so parameter gradients are produced with the sample
axis kept: ``grads[j][i]`` is the gradient of example ``i``'s loss with
respect to parameter tensor ``j``.  :func:`per_sample_gradients_replay`
recomputes the same quantity one example at a time and serves as a check.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np
import tomli
import tomli_w
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax, softmax

from .errors import ConfigError, NumericError

# ---------------------------------------------------------------------------
# Layer specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    type: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Conv2d:
    """Stride-1 'same' convolution with an odd kernel."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    type: str = field(default="conv", init=False)


@dataclass(frozen=True)
class MaxPool2d:
    size: int = 2
    type: str = field(default="maxpool", init=False)


@dataclass(frozen=True)
class GroupNorm:
    channels: int
    groups: int = 4
    affine: bool = False
    eps: float = 1e-5
    type: str = field(default="groupnorm", init=False)


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"  # relu | tanh | tempered-sigmoid
    s: float = 2.0
    T: float = 2.0
    o: float = 1.0
    type: str = field(default="activation", init=False)


@dataclass(frozen=True)
class Flatten:
    type: str = field(default="flatten", init=False)


LayerSpec = Union[Dense, Conv2d, MaxPool2d, GroupNorm, Activation, Flatten]
_LAYER_TYPES = {c.__dataclass_fields__["type"].default: c
                for c in (Dense, Conv2d, MaxPool2d, GroupNorm, Activation, Flatten)}
_ACTIVATIONS = ("relu", "tanh", "tempered-sigmoid")


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()  # validates

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-example shape after each layer (index 0 is the input)."""
        shape = self.input_shape
        out = [shape]
        for pos, layer in enumerate(self.layers):
            where = f"layer {pos} ({layer.type})"
            if isinstance(layer, Dense):
                if len(shape) != 1 or shape[0] != layer.in_features:
                    raise ConfigError(f"{where}: expects ({layer.in_features},), got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ConfigError(f"{where}: expects ({layer.in_channels}, H, W), got {shape}")
                if layer.kernel % 2 != 1:
                    raise ConfigError(f"{where}: kernel must be odd")
                shape = (layer.out_channels, shape[1], shape[2])
            elif isinstance(layer, MaxPool2d):
                if len(shape) != 3 or shape[1] % layer.size or shape[2] % layer.size:
                    raise ConfigError(f"{where}: spatial dims {shape[1:]} not divisible by {layer.size}")
                shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            elif isinstance(layer, GroupNorm):
                if shape[0] != layer.channels:
                    raise ConfigError(f"{where}: expects {layer.channels} channels, got {shape}")
                if layer.channels % layer.groups:
                    raise ConfigError(f"{where}: groups={layer.groups} does not divide {layer.channels}")
            elif isinstance(layer, Activation):
                if layer.kind not in _ACTIVATIONS:
                    raise ConfigError(f"{where}: unknown activation {layer.kind!r}")
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            else:
                raise ConfigError(f"{where}: unknown layer")
            out.append(shape)
        return out

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for layer in self.layers:
            shapes.extend(_param_shapes(layer))
        return shapes

    def last_dense_param_index(self) -> int:
        """Index of the weight of the final dense layer in the parameter list."""
        idx, found = 0, None
        for layer in self.layers:
            if isinstance(layer, Dense):
                found = idx
            idx += len(_param_shapes(layer))
        if found is None:
            raise ConfigError("network has no dense layer")
        return found


def _param_shapes(layer) -> list[tuple[int, ...]]:
    if isinstance(layer, Dense):
        return [(layer.in_features, layer.out_features), (layer.out_features,)]
    if isinstance(layer, Conv2d):
        return [(layer.out_channels, layer.in_channels, layer.kernel, layer.kernel), (layer.out_channels,)]
    if isinstance(layer, GroupNorm) and layer.affine:
        return [(layer.channels,), (layer.channels,)]
    return []


def mlp(input_dim: int, hidden: Sequence[int], num_classes: int, activation: str = "relu",
        groupnorm: int | None = None) -> NetworkSpec:
    """Dense stack ``input -> hidden... -> num_classes`` with optional group norm."""
    layers: list = []
    width = input_dim
    for h in hidden:
        layers.append(Dense(width, h))
        if groupnorm:
            layers.append(GroupNorm(h, groupnorm))
        layers.append(Activation(activation))
        width = h
    layers.append(Dense(width, num_classes))
    return NetworkSpec((input_dim,), tuple(layers))


def simple_cnn(in_channels: int, size: int, num_classes: int, filters=(8, 16), hidden: int = 32,
               activation: str = "relu", groupnorm: int | None = None) -> NetworkSpec:
    """Conv/act/pool blocks followed by a dense head (a scaled-down SimpleCNN)."""
    layers: list = []
    ch = in_channels
    for f in filters:
        layers.append(Conv2d(ch, f, 3))
        if groupnorm:
            layers.append(GroupNorm(f, groupnorm))
        layers += [Activation(activation), MaxPool2d(2)]
        ch = f
        size //= 2
    layers += [Flatten(), Dense(ch * size * size, hidden), Activation(activation), Dense(hidden, num_classes)]
    return NetworkSpec((in_channels, size * 2 ** len(filters), size * 2 ** len(filters)), tuple(layers))


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {"input_shape": list(spec.input_shape), "layers": [asdict(l) for l in spec.layers]}


def spec_from_dict(d: dict, where: str = "net") -> NetworkSpec:
    try:
        shape = d["input_shape"]
        raw_layers = d["layers"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{where}: missing key {exc}") from None
    layers = []
    for i, raw in enumerate(raw_layers):
        raw = dict(raw)
        kind = raw.pop("type", None)
        if kind not in _LAYER_TYPES:
            raise ConfigError(f"{where}.layers[{i}]: unknown layer type {kind!r}")
        try:
            layers.append(_LAYER_TYPES[kind](**raw))
        except TypeError as exc:
            raise ConfigError(f"{where}.layers[{i}]: {exc}") from None
    return NetworkSpec(tuple(shape), tuple(layers))


def dumps_spec(spec: NetworkSpec) -> str:
    return tomli_w.dumps(spec_to_dict(spec))


def loads_spec(text: str) -> NetworkSpec:
    try:
        return spec_from_dict(tomli.loads(text))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"network spec: {exc}") from None


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    params = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            bound = 1 / math.sqrt(layer.in_features)
            params.append(rng.uniform(-bound, bound, (layer.in_features, layer.out_features)))
            params.append(rng.uniform(-bound, bound, layer.out_features))
        elif isinstance(layer, Conv2d):
            bound = 1 / math.sqrt(layer.in_channels * layer.kernel**2)
            params.append(rng.uniform(-bound, bound, (layer.out_channels, layer.in_channels,
                                                      layer.kernel, layer.kernel)))
            params.append(rng.uniform(-bound, bound, layer.out_channels))
        elif isinstance(layer, GroupNorm) and layer.affine:
            params.append(np.ones(layer.channels))
            params.append(np.zeros(layer.channels))
    return params


def sgd_step(params: list[np.ndarray], grad: list[np.ndarray], lr: float) -> list[np.ndarray]:
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    return [p - lr * g for p, g in zip(params, grad)]


def flatten_params(arrays: Sequence[np.ndarray], batch: bool = False) -> np.ndarray:
    """Concatenate tensors; with ``batch`` keep the leading sample axis."""
    if batch:
        n = arrays[0].shape[0]
        return np.concatenate([a.reshape(n, -1) for a in arrays], axis=1)
    return np.concatenate([a.ravel() for a in arrays])


def unflatten_params(vec: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> list[np.ndarray]:
    out, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        out.append(vec[pos:pos + size].reshape(s))
        pos += size
    return out


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _act(layer: Activation, x):
    if layer.kind == "relu":
        return np.maximum(x, 0)
    if layer.kind == "tanh":
        return np.tanh(x)
    return layer.s * expit(layer.T * x) - layer.o


def _act_grad(layer: Activation, x):
    if layer.kind == "relu":
        return (x > 0).astype(x.dtype)
    if layer.kind == "tanh":
        return 1 - np.tanh(x) ** 2
    sig = expit(layer.T * x)
    return layer.s * layer.T * sig * (1 - sig)


def _forward(spec: NetworkSpec, params, x):
    x = np.asarray(x, dtype=float)
    if x.shape[1:] != spec.input_shape:
        raise ConfigError(f"batch shape {x.shape[1:]} does not match network input {spec.input_shape}")
    caches = []
    pre_acts = []
    p = 0
    for layer in spec.layers:
        n = x.shape[0]
        if isinstance(layer, Dense):
            W, b = params[p], params[p + 1]
            p += 2
            caches.append(x)
            x = x @ W + b
        elif isinstance(layer, Conv2d):
            W, b = params[p], params[p + 1]
            p += 2
            pad = layer.kernel // 2
            xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            win = sliding_window_view(xp, (layer.kernel, layer.kernel), axis=(2, 3))
            caches.append((x.shape, win))
            x = np.einsum("nchwij,ocij->nohw", win, W, optimize=True) + b[None, :, None, None]
        elif isinstance(layer, MaxPool2d):
            k = layer.size
            C, H, Wd = x.shape[1:]
            blocks = x.reshape(n, C, H // k, k, Wd // k, k).transpose(0, 1, 2, 4, 3, 5)
            blocks = blocks.reshape(n, C, H // k, Wd // k, k * k)
            idx = blocks.argmax(axis=-1)
            caches.append((x.shape, idx))
            x = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        elif isinstance(layer, GroupNorm):
            shape = x.shape
            g = x.reshape(n, layer.groups, -1)
            mu = g.mean(axis=-1, keepdims=True)
            var = g.var(axis=-1, keepdims=True)
            inv = 1 / np.sqrt(var + layer.eps)
            xhat = ((g - mu) * inv).reshape(shape)
            caches.append((xhat, inv))
            if layer.affine:
                gamma, beta = params[p], params[p + 1]
                p += 2
                bshape = (1, -1) + (1,) * (len(shape) - 2)
                x = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
            else:
                x = xhat
        elif isinstance(layer, Activation):
            caches.append(x)
            pre_acts.append(x)
            x = _act(layer, x)
        elif isinstance(layer, Flatten):
            caches.append(x.shape)
            x = x.reshape(n, -1)
    return x, caches, pre_acts


def forward(spec: NetworkSpec, params, x) -> np.ndarray:
    """Logits for a batch; deterministic and side-effect free."""
    return _forward(spec, params, x)[0]


def hidden_features(spec: NetworkSpec, params, x) -> np.ndarray:
    """Activations feeding the final dense layer (penultimate representation)."""
    x = np.asarray(x, dtype=float)
    trunk = NetworkSpec(spec.input_shape, spec.layers[:-1])
    if not isinstance(spec.layers[-1], Dense):
        raise ConfigError("hidden_features needs a network ending in a dense layer")
    return forward(trunk, params[:-2], x).reshape(len(x), -1)


def predict_proba(spec, params, x) -> np.ndarray:
    return softmax(forward(spec, params, x), axis=1)


def accuracy(spec, params, x, y) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(forward(spec, params, x).argmax(axis=1) == np.asarray(y)))


def _backward(spec: NetworkSpec, params, caches, pre_acts, dout, reg_coef=0.0):
    """Backpropagate per-example output gradients.

    Returns (per-sample parameter gradients in parameter order, input gradient).
    ``reg_coef`` adds the gradient of ``reg_coef * mean(pre_activation**2)``.
    """
    n = dout.shape[0]
    reg_units = sum(int(np.prod(a.shape[1:])) for a in pre_acts) or 1
    grads_rev: list[np.ndarray] = []
    p = len(params)
    for layer, cache in zip(reversed(spec.layers), reversed(caches)):
        if isinstance(layer, Dense):
            p -= 2
            W = params[p]
            x = cache
            grads_rev += [dout.copy(), x[:, :, None] * dout[:, None, :]]  # (b, W) reversed
            dout = dout @ W.T
        elif isinstance(layer, Conv2d):
            p -= 2
            W = params[p]
            xshape, win = cache
            grads_rev += [dout.sum(axis=(2, 3)), np.einsum("nohw,nchwij->nocij", dout, win, optimize=True)]
            k = layer.kernel
            pad = k // 2
            dwin = np.einsum("nohw,ocij->nchwij", dout, W, optimize=True)
            H, Wd = xshape[2], xshape[3]
            dxp = np.zeros((n, xshape[1], H + 2 * pad, Wd + 2 * pad))
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + H, j:j + Wd] += dwin[..., i, j]
            dout = dxp[:, :, pad:pad + H, pad:pad + Wd]
        elif isinstance(layer, MaxPool2d):
            xshape, idx = cache
            k = layer.size
            C, H, Wd = xshape[1:]
            dblocks = np.zeros((n, C, H // k, Wd // k, k * k))
            np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
            dblocks = dblocks.reshape(n, C, H // k, Wd // k, k, k).transpose(0, 1, 2, 4, 3, 5)
            dout = dblocks.reshape(xshape)
        elif isinstance(layer, GroupNorm):
            xhat, inv = cache
            shape = xhat.shape
            if layer.affine:
                p -= 2
                gamma = params[p]
                axes = tuple(range(2, len(shape)))
                grads_rev += [dout.sum(axis=axes) if axes else dout.copy(),
                              (dout * xhat).sum(axis=axes) if axes else dout * xhat]
                bshape = (1, -1) + (1,) * (len(shape) - 2)
                dout = dout * gamma.reshape(bshape)
            dx = dout.reshape(n, layer.groups, -1)
            xh = xhat.reshape(n, layer.groups, -1)
            dx = inv * (dx - dx.mean(axis=-1, keepdims=True) - xh * (dx * xh).mean(axis=-1, keepdims=True))
            dout = dx.reshape(shape)
        elif isinstance(layer, Activation):
            pre = cache
            dout = dout * _act_grad(layer, pre)
            if reg_coef:
                dout = dout + reg_coef * 2 * pre / reg_units
        elif isinstance(layer, Flatten):
            dout = dout.reshape(cache)
    return grads_rev[::-1], dout


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    """Training loss.

    ``composite`` mixes focal, SSE and a pre-activation penalty with weight
    ``alpha = sigmoid(epoch - e_t)``: ``alpha*focal + (1-alpha)*sse +
    (1-alpha)/beta * reg`` where ``reg`` is the mean squared pre-activation of
    all hidden units.  SSE is taken between softmax outputs and the one-hot
    target.
    """

    kind: str = "cross-entropy"  # cross-entropy | sse | focal | composite
    gamma: float = 2.0
    e_t: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cross-entropy", "sse", "focal", "composite"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.kind == "composite" and not self.beta > 0:
            raise ConfigError("composite loss needs beta > 0")
        if self.e_t < 0:
            raise ConfigError("e_t must be >= 0")


def composite_alpha(epoch: float, e_t: float) -> float:
    return float(expit(epoch - e_t))


def _ce(logits, y):
    logp = log_softmax(logits, axis=1)
    p = np.exp(logp)
    n = len(y)
    losses = -logp[np.arange(n), y]
    d = p.copy()
    d[np.arange(n), y] -= 1
    return losses, d


def _sse(logits, y):
    p = softmax(logits, axis=1)
    t = np.zeros_like(p)
    t[np.arange(len(y)), y] = 1
    diff = p - t
    losses = (diff**2).sum(axis=1)
    v = 2 * diff
    d = p * (v - (v * p).sum(axis=1, keepdims=True))
    return losses, d


def _focal(logits, y, gamma):
    logp_all = log_softmax(logits, axis=1)
    p_all = np.exp(logp_all)
    idx = np.arange(len(y))
    logp = logp_all[idx, y]
    p = p_all[idx, y]
    one_m = 1 - p
    losses = -(one_m**gamma) * logp
    # d/dp of -(1-p)^g log p
    dl_dp = gamma * one_m ** (gamma - 1) * logp - one_m**gamma / p
    onehot = np.zeros_like(p_all)
    onehot[idx, y] = 1
    d = (dl_dp * p)[:, None] * (onehot - p_all)
    return losses, d


def loss_and_grad(loss: LossSpec, logits, y, epoch: float = 0, pre_acts=()):
    """Per-example loss values, d loss / d logits, and the pre-activation penalty weight."""
    y = np.asarray(y, dtype=int)
    k = logits.shape[1]
    if len(y) and (y.min() < 0 or y.max() >= k):
        raise ConfigError(f"labels must lie in [0, {k})")
    if loss.kind == "cross-entropy":
        return (*_ce(logits, y), 0.0)
    if loss.kind == "sse":
        return (*_sse(logits, y), 0.0)
    if loss.kind == "focal":
        return (*_focal(logits, y, loss.gamma), 0.0)
    alpha = composite_alpha(epoch, loss.e_t)
    lf, df = _focal(logits, y, loss.gamma)
    ls, ds = _sse(logits, y)
    coef = (1 - alpha) / loss.beta
    reg = _reg_per_sample(pre_acts, len(y))
    return alpha * lf + (1 - alpha) * ls + coef * reg, alpha * df + (1 - alpha) * ds, coef


def _reg_per_sample(pre_acts, n):
    if not pre_acts:
        return np.zeros(n)
    flat = np.concatenate([a.reshape(n, -1) for a in pre_acts], axis=1)
    return (flat**2).mean(axis=1)


def composite_loss(logits, labels, epoch, e_t, beta, pre_activations=(), gamma: float = 2.0) -> float:
    """Batch-mean of the composite focal/SSE/pre-activation objective."""
    spec = LossSpec("composite", gamma=gamma, e_t=e_t, beta=beta)
    losses, _, _ = loss_and_grad(spec, np.asarray(logits, float), labels, epoch, list(pre_activations))
    return float(np.mean(losses))


def _check_finite(losses):
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NumericError(f"non-finite loss at sample {int(bad[0])}")


def per_sample_gradients(spec: NetworkSpec, params, x, y, loss: LossSpec = LossSpec(), epoch: float = 0):
    """Per-example losses and gradients ``(losses, [g_param (n, *shape), ...])``."""
    logits, caches, pre = _forward(spec, params, x)
    losses, dlogits, coef = loss_and_grad(loss, logits, y, epoch, pre)
    _check_finite(losses)
    grads, _ = _backward(spec, params, caches, pre, dlogits, coef)
    return losses, grads


def per_sample_gradients_replay(spec: NetworkSpec, params, x, y, loss: LossSpec = LossSpec(), epoch: float = 0):
    """Same result as :func:`per_sample_gradients`, one backward pass per example."""
    x = np.asarray(x, float)
    y = np.asarray(y, int)
    losses, stacks = [], [[] for _ in params]
    for i in range(len(x)):
        li, gi = per_sample_gradients(spec, params, x[i:i + 1], y[i:i + 1], loss, epoch)
        losses.append(li[0])
        for s, g in zip(stacks, gi):
            s.append(g[0])
    shapes = [p.shape for p in params]
    return np.array(losses), [np.array(s) if s else np.zeros((0, *sh)) for s, sh in zip(stacks, shapes)]


def input_gradients(spec: NetworkSpec, params, x, y, loss: LossSpec = LossSpec(), epoch: float = 0):
    """d loss_i / d x_i for every example."""
    logits, caches, pre = _forward(spec, params, x)
    losses, dlogits, coef = loss_and_grad(loss, logits, y, epoch, pre)
    _check_finite(losses)
    _, dx = _backward(spec, params, caches, pre, dlogits, coef)
    return dx


def batch_loss(spec, params, x, y, loss: LossSpec = LossSpec(), epoch: float = 0) -> float:
    """Summed loss over the batch."""
    logits, _, pre = _forward(spec, params, x)
    losses, _, _ = loss_and_grad(loss, logits, y, epoch, pre)
    return float(np.sum(losses))
