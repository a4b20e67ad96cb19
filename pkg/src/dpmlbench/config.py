"""Experiment configuration: TOML documents validated into frozen dataclasses.

Errors name the offending key path (``train.lr``) or, for syntax errors,
the line and column reported by the TOML parser.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import tomli

from .errors import ConfigError

ALGORITHMS = ("dpsgd", "tanh-act", "focal-loss", "hand-dp", "adp-clip", "adp-alloc", "rgp", "gep",
              "pate", "priv-knn", "privset", "lp-mst", "alibi", "non-private")
DEFAULT_EPSILONS = (0.2, 0.3, 0.4, 0.5, 1.0, 2.0, 4.0, 8.0, 100.0, 1000.0)


# ---------------------------------------------------------------------------
# Validators
# ---------------------------------------------------------------------------


def _num(lo=None, hi=None, strict_lo=False, integer=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"expected a number, got {v!r}")
        if integer and (isinstance(v, float) and not v.is_integer()):
            raise ValueError(f"expected an integer, got {v!r}")
        if lo is not None and (v <= lo if strict_lo else v < lo):
            raise ValueError(f"must be {'>' if strict_lo else '>='} {lo}, got {v!r}")
        if hi is not None and v > hi:
            raise ValueError(f"must be <= {hi}, got {v!r}")
        return int(v) if integer else float(v)
    return check


def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"expected one of {', '.join(map(str, options))}; got {v!r}")
        return v
    return check


def _str(v):
    if not isinstance(v, str):
        raise ValueError(f"expected a string, got {v!r}")
    return v


def _table(v):
    if not isinstance(v, dict):
        raise ValueError(f"expected a table, got {v!r}")
    return v


def _list(item, min_len=0):
    def check(v):
        if not isinstance(v, list):
            raise ValueError(f"expected a list, got {v!r}")
        if len(v) < min_len:
            raise ValueError(f"expected at least {min_len} entries")
        out = []
        for i, x in enumerate(v):
            try:
                out.append(item(x))
            except ValueError as exc:
                raise ValueError(f"[{i}]: {exc}") from None
        return tuple(out)
    return check


def _epsilon(v):
    if isinstance(v, str) and v.strip().lower() in ("inf", "infinity"):
        return math.inf
    v = _num()(v)
    if not v > 0:
        raise ValueError(f"epsilon must be positive or 'inf', got {v!r}")
    return v


def _section(raw: Any, path: str, schema: dict[str, tuple[Any, Callable]]) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a table")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    out = {}
    for key, (default, check) in schema.items():
        if key in raw:
            try:
                out[key] = check(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{path}.{key}: {exc}") from None
        else:
            out[key] = default
    return out


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    kind: str = "blobs"  # blobs | idx | csv
    n_per_class: int = 500
    classes: int = 4
    dim: int = 10
    separation: float = 3.0
    label_noise: float = 0.0
    seed: int = 0
    images: str = ""
    labels: str = ""
    resize: int = 0
    path: str = ""


@dataclass(frozen=True)
class NetConfig:
    kind: str = "mlp"  # mlp | cnn | layers
    hidden: tuple[int, ...] = (64,)
    activation: str = "relu"
    groupnorm: int = 0
    filters: tuple[int, ...] = (8, 16)
    layers: tuple[dict, ...] = ()


@dataclass(frozen=True)
class TrainSection:
    lr: float = 0.1
    epochs: int = 30
    batch_size: int = 50
    clip: float = 4.0


@dataclass(frozen=True)
class AttackSection:
    modes: tuple[str, ...] = ("black", "white")
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    branch_width: int = 64
    head_width: int = 64


_ALGO_SCHEMAS: dict[str, dict[str, tuple[Any, Callable]]] = {
    "dpsgd": {},
    "non-private": {},
    "tanh-act": {"s": (2.0, _num(strict_lo=True, lo=0)), "T": (2.0, _num(strict_lo=True, lo=0)),
                 "o": (1.0, _num())},
    "focal-loss": {"e_t": (None, _num(lo=0)), "beta": (1.0, _num(lo=0, strict_lo=True)),
                   "gamma": (2.0, _num(lo=0))},
    "hand-dp": {"hidden": ((64,), _list(_num(lo=1, integer=True)))},
    "adp-clip": {"gamma": (0.7, _num(0, 1)), "eta": (0.1, _num(lo=0, strict_lo=True)),
                 "c_min": (0.05, _num(lo=0, strict_lo=True)), "c_max": (10.0, _num(lo=0, strict_lo=True)),
                 "sigma_b": (None, _num(lo=0, strict_lo=True))},
    "adp-alloc": {"k": (0.01, _num(lo=0, strict_lo=True))},
    "rgp": {"rank": (16, _num(lo=1, integer=True))},
    "gep": {"num_bases": (32, _num(lo=1, integer=True)), "num_groups": (1, _num(lo=1, integer=True)),
            "power_iters": (2, _num(lo=1, integer=True)), "resid_ratio": (0.2, _num(lo=0, strict_lo=True)),
            "public_size": (128, _num(lo=1, integer=True))},
    "pate": {"teachers": (100, _num(lo=1, integer=True)), "queries": (0, _num(lo=0, integer=True))},
    "priv-knn": {"k": (10, _num(lo=1, integer=True)), "sample_prob": (0.15, _num(0, 1, strict_lo=True)),
                 "queries": (0, _num(lo=0, integer=True)), "rounds": (1, _num(lo=1, integer=True))},
    "privset": {"samples_per_class": (10, _num(lo=1, integer=True)), "iterations": (100, _num(lo=1, integer=True)),
                "batch_size": (32, _num(lo=1, integer=True)), "lr": (0.3, _num(lo=0, strict_lo=True))},
    "lp-mst": {"stages": (2, _num(lo=1, integer=True))},
    "alibi": {},
}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    algorithms: tuple[str, ...] = ("dpsgd",)
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    delta: float = 1e-5
    repeats: int = 3
    seed: int = 0
    data: DataConfig = DataConfig()
    net: NetConfig = NetConfig()
    train: TrainSection = TrainSection()
    attack: AttackSection = AttackSection()
    options: dict[str, dict] = field(default_factory=dict)

    def algo(self, name: str) -> dict:
        """Options for one algorithm with defaults filled in."""
        base = {k: d for k, (d, _) in _ALGO_SCHEMAS[name].items()}
        base.update(self.options.get(name, {}))
        return base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epsilons"] = ["inf" if math.isinf(e) else e for e in self.epsilons]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a table")
    top_keys = {"experiment", "data", "net", "train", "attack", "algorithms"}
    unknown = sorted(set(d) - top_keys)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")

    exp = _section(d.get("experiment"), "experiment", {
        "name": ("experiment", _str),
        "algorithm": (None, _choice(*ALGORITHMS)),
        "algorithms": (None, _list(_choice(*ALGORITHMS), 1)),
        "epsilons": (DEFAULT_EPSILONS, _list(_epsilon, 1)),
        "delta": (1e-5, _num(0, 1, strict_lo=True)),
        "repeats": (3, _num(lo=1, integer=True)),
        "seed": (0, _num(lo=0, integer=True)),
    })
    if exp["algorithm"] and exp["algorithms"]:
        raise ConfigError("experiment.algorithm: give either 'algorithm' or 'algorithms', not both")
    algorithms = exp["algorithms"] or ((exp["algorithm"],) if exp["algorithm"] else ("dpsgd",))
    if not exp["delta"] < 1:
        raise ConfigError("experiment.delta: must be < 1")

    data = _section(d.get("data"), "data", {
        "kind": ("blobs", _choice("blobs", "idx", "csv")),
        "n_per_class": (500, _num(lo=1, integer=True)),
        "classes": (4, _num(lo=2, integer=True)),
        "dim": (10, _num(lo=1, integer=True)),
        "separation": (3.0, _num(lo=0)),
        "label_noise": (0.0, _num(0, 1)),
        "seed": (exp["seed"], _num(lo=0, integer=True)),
        "images": ("", _str), "labels": ("", _str),
        "resize": (0, _num(lo=0, integer=True)),
        "path": ("", _str),
    })
    if data["kind"] == "idx" and not (data["images"] and data["labels"]):
        raise ConfigError("data.images: idx datasets need 'images' and 'labels' paths")
    if data["kind"] == "csv" and not data["path"]:
        raise ConfigError("data.path: csv datasets need a path")
    if data["kind"] == "blobs" and data["classes"] > data["dim"]:
        raise ConfigError("data.classes: must not exceed data.dim for blobs")

    net = _section(d.get("net"), "net", {
        "kind": ("mlp", _choice("mlp", "cnn", "layers")),
        "hidden": ((64,), _list(_num(lo=1, integer=True))),
        "activation": ("relu", _choice("relu", "tanh", "tempered-sigmoid")),
        "groupnorm": (0, _num(lo=0, integer=True)),
        "filters": ((8, 16), _list(_num(lo=1, integer=True), 1)),
        "layers": ((), _list(_table)),
    })
    if net["kind"] == "layers" and not net["layers"]:
        raise ConfigError("net.layers: kind='layers' needs a non-empty layer list")

    train = _section(d.get("train"), "train", {
        "lr": (0.1, _num(lo=0, strict_lo=True)),
        "epochs": (30, _num(lo=1, integer=True)),
        "batch_size": (50, _num(lo=1, integer=True)),
        "clip": (4.0, _num(lo=0, strict_lo=True)),
    })
    attack = _section(d.get("attack"), "attack", {
        "modes": (("black", "white"), _list(_choice("black", "white"), 1)),
        "lr": (1e-3, _num(lo=0, strict_lo=True)),
        "epochs": (50, _num(lo=1, integer=True)),
        "batch_size": (64, _num(lo=1, integer=True)),
        "branch_width": (64, _num(lo=1, integer=True)),
        "head_width": (64, _num(lo=1, integer=True)),
    })

    raw_opts = d.get("algorithms", {})
    if not isinstance(raw_opts, dict):
        raise ConfigError("algorithms: expected a table of per-algorithm options")
    options = {}
    for name, sub in raw_opts.items():
        if name not in _ALGO_SCHEMAS:
            raise ConfigError(f"algorithms.{name}: unknown algorithm")
        given = set(sub) if isinstance(sub, dict) else set()
        full = _section(sub, f"algorithms.{name}", _ALGO_SCHEMAS[name])
        options[name] = {k: v for k, v in full.items() if k in given}

    return ExperimentConfig(
        name=exp["name"], algorithms=tuple(algorithms), epsilons=tuple(exp["epsilons"]), delta=exp["delta"],
        repeats=exp["repeats"], seed=exp["seed"], data=DataConfig(**data), net=NetConfig(**net),
        train=TrainSection(**train), attack=AttackSection(**attack), options=options)


def loads_config(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    return config_from_dict(raw)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads_config(text)
