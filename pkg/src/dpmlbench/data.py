"""Datasets, evaluation splits, fixed features and private condensation."""

from __future__ import annotations

import csv
import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import nn
from .accountant import PrivacyLedger, PrivacySpec, SubsampledGaussian, calibrate
from .errors import ConfigError, FormatError
from .optimizers import clip_per_sample, privatize_sum

DATA_DIR_ENV = "DPMLBENCH_DATA_DIR"


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = ""
    source: str = "synthetic"  # idx-file | csv | synthetic | condensed
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if len(self.x) == 0:
            raise ConfigError(f"dataset {self.name!r} is empty")
        if len(self.x) != len(self.y):
            raise ConfigError(f"dataset {self.name!r}: {len(self.x)} inputs but {len(self.y)} labels")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise ConfigError(f"dataset {self.name!r}: labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.name, self.source, dict(self.meta))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    """Index sets for the target/shadow train/test roles.

    ``public`` is carved out of ``target_test`` and serves as unlabeled public
    data; ``holdout`` is the remainder of ``target_test``.
    """

    target_train: np.ndarray
    target_test: np.ndarray
    shadow_train: np.ndarray
    shadow_test: np.ndarray
    public: np.ndarray

    @property
    def holdout(self) -> np.ndarray:
        return np.setdiff1d(self.target_test, self.public, assume_unique=True)

    def core_sets(self):
        return [self.target_train, self.target_test, self.shadow_train, self.shadow_test]


def four_way_split(n: int | Dataset, seed: int, public_frac: float = 0.9) -> SplitPlan:
    """Shuffle and cut into four near-equal disjoint quarters."""
    n = len(n) if isinstance(n, Dataset) else int(n)
    if n < 8:
        raise ConfigError(f"need at least 8 samples for a four-way split, got {n}")
    if not 0 <= public_frac < 1:
        raise ConfigError("public_frac must lie in [0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    tt, te, st, se = np.array_split(perm, 4)
    public = te[: int(round(public_frac * len(te)))]
    return SplitPlan(tt, te, st, se, public)


# ---------------------------------------------------------------------------
# Generators and loaders
# ---------------------------------------------------------------------------


def synth_blobs(n_per_class: int, classes: int, dim: int, separation: float, seed: int,
                label_noise: float = 0.0) -> Dataset:
    """Unit-variance Gaussian blobs whose centers are pairwise ``separation`` apart.

    Center ``c`` sits at ``separation / sqrt(2) * e_c``.  ``label_noise``
    reassigns that fraction of labels uniformly at random, which makes the
    task overfittable.
    """
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    if classes > dim:
        raise ConfigError(f"classes ({classes}) must not exceed dim ({dim})")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(classes), n_per_class)
    centers = np.eye(dim)[:classes] * (separation / math.sqrt(2))
    x = centers[y] + rng.normal(size=(len(y), dim))
    if label_noise > 0:
        flip = rng.random(len(y)) < label_noise
        y = y.copy()
        y[flip] = rng.integers(0, classes, int(flip.sum()))
    perm = rng.permutation(len(y))
    return Dataset(x[perm], y[perm], classes, "blobs", "synthetic",
                   {"separation": separation, "seed": seed, "label_noise": label_noise})


def resolve_data_path(path) -> Path:
    p = Path(path)
    root = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and root:
        return Path(root) / p
    return p


def _read_bytes(path) -> bytes:
    path = resolve_data_path(path)
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def parse_idx(buf: bytes, expect_magic: int | None = None) -> np.ndarray:
    """Decode an IDX blob; the whole buffer is validated before returning."""
    if len(buf) < 4:
        raise FormatError("truncated IDX header", len(buf))
    magic = struct.unpack(">I", buf[:4])[0]
    if expect_magic is not None and magic != expect_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}", 0)
    if buf[0] or buf[1]:
        raise FormatError(f"bad magic 0x{magic:08x}", 0)
    code, ndim = buf[2], buf[3]
    if code not in _IDX_DTYPES:
        raise FormatError(f"unknown IDX type code 0x{code:02x}", 2)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError("truncated IDX dimensions", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = np.dtype(_IDX_DTYPES[code])
    need = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated IDX payload: need {need} bytes, have {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after IDX payload", need)
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {v: k for k, v in _IDX_DTYPES.items()}
    key = array.dtype.newbyteorder(">").str
    if array.dtype == np.uint8:
        key = ">u1"
    elif array.dtype == np.int8:
        key = ">i1"
    if key not in codes:
        raise ConfigError(f"dtype {array.dtype} has no IDX code")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, codes[key], array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(key, copy=False).tobytes())


def resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes to ``size x size``."""
    h, w = images.shape[-2:]
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return images[..., rows[:, None], cols[None, :]]


def load_idx(images_path, labels_path, resize: int | None = None, name: str = "idx") -> Dataset:
    """Read an image/label IDX pair; pixels are scaled to [0, 1]."""
    imgs = parse_idx(_read_bytes(images_path), 0x00000803)
    labels = parse_idx(_read_bytes(labels_path), 0x00000801)
    if len(imgs) != len(labels):
        raise FormatError(f"{len(imgs)} images but {len(labels)} labels", 4)
    x = imgs.astype(float)[:, None, :, :] / 255.0
    if resize:
        x = resize_nearest(x, resize)
    y = labels.astype(int)
    return Dataset(x, y, int(y.max()) + 1, name, "idx-file", {"images": str(images_path)})


def load_csv(path, name: str | None = None, num_classes: int | None = None) -> Dataset:
    """Numeric CSV with a header row; the ``label`` column holds class ids."""
    rpath = resolve_data_path(path)
    try:
        with open(rpath, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {rpath}: {exc}") from None
    if not rows:
        raise FormatError(f"{rpath}: empty file", 0)
    header = rows[0]
    if "label" not in header:
        raise FormatError(f"{rpath}: no 'label' column in header", 0)
    li = header.index("label")
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ConfigError(f"{rpath}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            labels.append(int(row[li]))
            feats.append([float(v) for j, v in enumerate(row) if j != li])
        except ValueError as exc:
            raise ConfigError(f"{rpath}:{lineno}: {exc}") from None
    y = np.array(labels, dtype=int)
    k = num_classes or (int(y.max()) + 1 if len(y) else 0)
    return Dataset(np.array(feats), y, k, name or rpath.stem, "csv", {"path": str(path)})


# ---------------------------------------------------------------------------
# Fixed features
# ---------------------------------------------------------------------------


def _haar_level(a: np.ndarray):
    p, q = a[..., 0::2, 0::2], a[..., 0::2, 1::2]
    r, s = a[..., 1::2, 0::2], a[..., 1::2, 1::2]
    ll = (p + q + r + s) / 2
    lh = (p - q + r - s) / 2
    hl = (p + q - r - s) / 2
    hh = (p - q - r + s) / 2
    return ll, (lh, hl, hh)


def fixed_features(images: np.ndarray) -> np.ndarray:
    """Absolute two-level orthonormal Haar coefficients, channels concatenated.

    Accepts one image ``(C, H, W)`` or a batch ``(n, C, H, W)``.  For side
    ``s`` the length per channel is ``4*(s/4)**2 + 3*(s/2)**2``.
    """
    a = np.asarray(images, dtype=float)
    single = a.ndim == 3
    if single:
        a = a[None]
    if a.ndim != 4 or a.shape[2] != a.shape[3] or a.shape[2] % 4:
        raise ConfigError(f"need square images with side divisible by 4, got {a.shape[1:]}")
    ll1, d1 = _haar_level(a)
    ll2, d2 = _haar_level(ll1)
    n = a.shape[0]
    bands = [ll2, *d2, *d1]
    out = np.abs(np.concatenate([b.reshape(n, a.shape[1], -1) for b in bands], axis=2)).reshape(n, -1)
    return out[0] if single else out


def feature_length(side: int, channels: int = 1) -> int:
    return channels * (4 * (side // 4) ** 2 + 3 * (side // 2) ** 2)


# ---------------------------------------------------------------------------
# Private condensation
# ---------------------------------------------------------------------------


def _class_mean_grads(net, params, x, y, classes, denom, loss):
    """Per-class sums of (already processed) per-sample gradients divided by ``denom``."""
    out = []
    _, grads = nn.per_sample_gradients(net, params, x, y, loss)
    flat = nn.flatten_params(grads, batch=True)
    for c in range(classes):
        out.append(flat[y == c].sum(axis=0) / denom[c])
    return out


def matching_loss(net, params, syn_x, syn_y, target_grads, classes, loss=nn.LossSpec()) -> float:
    """Sum over classes of squared distance between synthetic and target gradients."""
    denom = np.bincount(syn_y, minlength=classes).astype(float)
    g = _class_mean_grads(net, params, syn_x, syn_y, classes, denom, loss)
    return float(sum(np.sum((gc - tc) ** 2) for gc, tc in zip(g, target_grads)))


def matching_step(net, params, syn_x, syn_y, target_grads, classes, fd_step: float = 1e-4):
    """Matching loss and its gradient with respect to the synthetic inputs.

    With ``g_c(S)`` the mean parameter gradient of class ``c`` and
    ``v = 2 (g_c - target_c)``, the input gradient of sample ``s`` is
    ``d/ds <grad_theta l(s), v> / n_c``, taken as a central difference in
    parameter space along ``v``.
    """
    denom = np.bincount(syn_y, minlength=classes).astype(float)
    g = _class_mean_grads(net, params, syn_x, syn_y, classes, np.maximum(denom, 1), nn.LossSpec())
    flat = nn.flatten_params(params)
    shapes = [p.shape for p in params]
    total = 0.0
    step = np.zeros_like(syn_x)
    for c in range(classes):
        diff = g[c] - target_grads[c]
        total += float(diff @ diff)
        v = 2 * diff
        vn = np.linalg.norm(v)
        sel = syn_y == c
        if vn == 0 or not sel.any():
            continue
        h = fd_step / vn
        plus = nn.unflatten_params(flat + h * v, shapes)
        minus = nn.unflatten_params(flat - h * v, shapes)
        gp = nn.input_gradients(net, plus, syn_x[sel], syn_y[sel])
        gm = nn.input_gradients(net, minus, syn_x[sel], syn_y[sel])
        step[sel] = (gp - gm) / (2 * h) / denom[c]
    return total, step


def privset_condense(private: Dataset, samples_per_class: int, privacy: PrivacySpec, net_spec: nn.NetworkSpec,
                     rng: np.random.Generator, *, iterations: int = 100, batch_size: int = 32, C: float = 4.0,
                     lr: float = 0.3, fd_step: float = 1e-4, init: np.ndarray | None = None,
                     sigma: float | None = None, ledger: PrivacyLedger | None = None) -> Dataset:
    """Learn ``samples_per_class`` synthetic inputs per class by gradient matching.

    Each iteration draws a fresh random network, Poisson-samples the private
    set, clips per-example gradients to ``C`` and releases noisy per-class
    gradient sums (one subsampled-Gaussian event, since every record touches
    exactly one class).  The synthetic points then take a step on the squared
    gradient distance.  The Jacobian-vector product this needs is taken by a
    central difference in parameter space:
    ``d/dS <grad_theta L(S), v> ~ (grad_S L(theta + h v) - grad_S L(theta - h v)) / 2h``.

    ``sigma`` overrides calibration (``0`` disables noise); ``init`` sets the
    starting synthetic inputs, ordered class by class.
    """
    if samples_per_class < 1:
        raise ConfigError("samples_per_class must be >= 1")
    k = private.num_classes
    n = len(private)
    q = min(1.0, batch_size / n)
    if sigma is None:
        sigma = calibrate(lambda s: [SubsampledGaussian(q, s, iterations)], privacy) if privacy.is_private else 0.0
    ledger = ledger if ledger is not None else PrivacyLedger(privacy)
    if sigma > 0:
        ledger.check(SubsampledGaussian(q, sigma, iterations))

    syn_y = np.repeat(np.arange(k), samples_per_class)
    if init is None:
        syn_x = rng.normal(size=(len(syn_y),) + private.x.shape[1:]) * private.x.std() + private.x.mean()
    else:
        syn_x = np.array(init, dtype=float)
        if syn_x.shape != (len(syn_y),) + private.x.shape[1:]:
            raise ConfigError("init has the wrong shape")
    class_counts = np.bincount(private.y, minlength=k).astype(float)
    expected = np.maximum(q * class_counts, 1e-12)
    shapes = net_spec.param_shapes()
    history = []

    for it in range(iterations):
        params = nn.init_params(net_spec, rng)
        idx = np.flatnonzero(rng.random(n) < q)
        xb, yb = private.x[idx], private.y[idx]
        if len(idx):
            _, grads = nn.per_sample_gradients(net_spec, params, xb, yb)
            if math.isfinite(C):
                grads = clip_per_sample(grads, C)
            flat = nn.flatten_params(grads, batch=True)
        else:
            flat = np.zeros((0, sum(int(np.prod(s)) for s in shapes)))
        # Noise every class block, i.e. the whole concatenated release.
        noisy = [privatize_sum([flat[yb == c]], C, sigma, rng)[0] / expected[c] for c in range(k)]
        if sigma > 0:
            ledger.record(SubsampledGaussian(q, sigma), "privset", it, check=False)

        total, step = matching_step(net_spec, params, syn_x, syn_y, noisy, k, fd_step)
        history.append(total)
        syn_x = syn_x - lr * step

    meta = {"provenance": "privset", "epsilon": ledger.epsilon(), "sigma": sigma,
            "trace": ledger.trace, "matching_loss": history}
    return Dataset(syn_x, syn_y, k, f"{private.name}-condensed", "condensed", meta)
