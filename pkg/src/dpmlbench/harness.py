"""End-to-end benchmark runs: train, attack, score, persist, report.

Every (algorithm, epsilon, repeat) cell owns an RNG stream derived from the
experiment seed and the cell's identity, so results do not depend on which
other cells run.  Per repeat, the non-private baseline, the shadow model and
the attack models are built once per model family and shared by every cell
of that family.
"""

from __future__ import annotations

import csv
import io
import json
import math
import platform
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from . import __version__, attacks, data, ensemble, labeldp, nn
from .accountant import PrivacyLedger, PrivacySpec, convert_convention
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DpmlBenchError
from .metrics import privacy_leakage, tailored_auc, utility_loss
from .optimizers import (ClipPolicy, DpTrainConfig, NoiseSchedule, calibrate_training, train,
                         train_nonprivate)

RESULT_COLUMNS = [
    "experiment", "algorithm", "epsilon", "convention", "repeat", "stat", "status",
    "accuracy", "baseline_accuracy", "utility_loss",
    "auc_black", "tailored_auc_black", "baseline_auc_black", "leakage_black",
    "auc_white", "tailored_auc_white", "baseline_auc_white", "leakage_white",
    "eps_spent", "sigma", "message",
]
NUMERIC_COLUMNS = [c for c in RESULT_COLUMNS
                   if c not in ("experiment", "algorithm", "convention", "stat", "status", "message", "repeat")]
LABEL_DP = ("lp-mst", "alibi")
ENSEMBLES = ("pate", "priv-knn")


class Unavailable(DpmlBenchError):
    """The algorithm cannot run on this data/architecture combination."""


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


@dataclass
class Model:
    """A network plus the fixed input transform it expects."""

    net: nn.NetworkSpec
    params: list[np.ndarray]
    preprocess: str = "none"  # none | flatten | haar

    def inputs(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.preprocess == "haar":
            return data.fixed_features(x)
        if self.preprocess == "flatten":
            return x.reshape(len(x), -1)
        return x

    def accuracy(self, x, y) -> float:
        return nn.accuracy(self.net, self.params, self.inputs(x), y)

    def save(self, path) -> None:
        arrays = {f"p{i}": p for i, p in enumerate(self.params)}
        np.savez(path, net=np.array(nn.dumps_spec(self.net)), preprocess=np.array(self.preprocess), **arrays)

    @classmethod
    def load(cls, path) -> "Model":
        try:
            with np.load(path, allow_pickle=False) as z:
                net = nn.loads_spec(str(z["net"]))
                n = sum(1 for k in z.files if k.startswith("p") and k[1:].isdigit())
                params = [z[f"p{i}"] for i in range(n)]
                pre = str(z["preprocess"])
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot load model {path}: {exc}") from None
        if [p.shape for p in params] != [tuple(s) for s in net.param_shapes()]:
            raise ConfigError(f"model {path}: parameters do not match the network spec")
        return cls(net, params, pre)


def load_dataset(cfg: ExperimentConfig) -> data.Dataset:
    d = cfg.data
    if d.kind == "blobs":
        return data.synth_blobs(d.n_per_class, d.classes, d.dim, d.separation, d.seed, d.label_noise)
    if d.kind == "idx":
        return data.load_idx(d.images, d.labels, resize=d.resize or None)
    return data.load_csv(d.path)


def _is_image(ds: data.Dataset) -> bool:
    return ds.x.ndim == 4


def family_net(cfg: ExperimentConfig, ds: data.Dataset, family: str) -> tuple[nn.NetworkSpec, str]:
    """Network spec and input transform for a model family (base, tanh or haar)."""
    nc = cfg.net
    k = ds.num_classes
    act = nc.activation
    if family == "tanh":
        act = "tempered-sigmoid"
    gn = nc.groupnorm or None
    if family == "haar":
        if not _is_image(ds) or ds.x.shape[2] != ds.x.shape[3] or ds.x.shape[2] % 4:
            raise Unavailable("hand-dp needs square images with side divisible by 4")
        width = data.feature_length(ds.x.shape[2], ds.x.shape[1])
        return nn.mlp(width, cfg.algo("hand-dp")["hidden"], k, act), "haar"
    if nc.kind == "layers":
        spec = nn.spec_from_dict({"input_shape": list(ds.x.shape[1:]), "layers": list(nc.layers)}, "net")
        return (_tempered(spec, cfg) if family == "tanh" else spec), "none"
    if nc.kind == "cnn":
        if not _is_image(ds):
            raise ConfigError("net.kind: cnn needs image data")
        spec = nn.simple_cnn(ds.x.shape[1], ds.x.shape[2], k, nc.filters, nc.hidden[-1] if nc.hidden else 32,
                             act, gn)
        return _tempered(spec, cfg) if family == "tanh" else spec, "none"
    width = int(np.prod(ds.x.shape[1:]))
    spec = nn.mlp(width, nc.hidden, k, act, gn)
    return (_tempered(spec, cfg) if family == "tanh" else spec), ("flatten" if ds.x.ndim > 2 else "none")


def _tempered(spec: nn.NetworkSpec, cfg: ExperimentConfig) -> nn.NetworkSpec:
    o = cfg.algo("tanh-act")
    layers = tuple(nn.Activation("tempered-sigmoid", o["s"], o["T"], o["o"]) if isinstance(l, nn.Activation)
                   else l for l in spec.layers)
    return nn.NetworkSpec(spec.input_shape, layers)


def _family(alg: str) -> str:
    return {"tanh-act": "tanh", "hand-dp": "haar"}.get(alg, "base")


def _rng(seed: int, *parts) -> np.random.Generator:
    key = [seed] + [zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(key)


def base_train_config(cfg: ExperimentConfig) -> DpTrainConfig:
    t = cfg.train
    return DpTrainConfig(lr=t.lr, epochs=t.epochs, batch_size=t.batch_size, clip=ClipPolicy("fixed", t.clip))


def attack_config(cfg: ExperimentConfig) -> attacks.AttackConfig:
    a = cfg.attack
    return attacks.AttackConfig(a.branch_width, a.head_width, a.lr, a.epochs, a.batch_size)


# ---------------------------------------------------------------------------
# Per-repeat context
# ---------------------------------------------------------------------------


@dataclass
class _FamilyContext:
    baseline: Model
    attackers: dict[str, attacks.Attacker]


class RepeatContext:
    """Split plan plus lazily built baseline/shadow/attackers per family."""

    def __init__(self, cfg: ExperimentConfig, ds: data.Dataset, repeat: int):
        self.cfg = cfg
        self.ds = ds
        self.repeat = repeat
        self.plan = data.four_way_split(ds, cfg.seed * 1000 + repeat)
        self._families: dict[str, _FamilyContext] = {}

    def family(self, name: str) -> _FamilyContext:
        if name not in self._families:
            self._families[name] = self._build(name)
        return self._families[name]

    def _build(self, name: str) -> _FamilyContext:
        cfg, ds, plan = self.cfg, self.ds, self.plan
        net, pre = family_net(cfg, ds, name)
        tcfg = base_train_config(cfg)

        def fit(idx, tag):
            rng = _rng(cfg.seed, self.repeat, tag, name)
            m = Model(net, [], pre)
            x = m.inputs(ds.x[idx])
            m.params = train_nonprivate(net, nn.init_params(net, rng), x, ds.y[idx], tcfg, rng)
            return m

        baseline = fit(plan.target_train, "baseline")
        shadow = fit(plan.shadow_train, "shadow")
        attackers = {}
        for mode in cfg.attack.modes:
            feats, labels = attacks.membership_features(
                net, shadow.params, shadow.inputs(ds.x), ds.y, plan.shadow_train, plan.shadow_test, mode)
            attackers[mode] = attacks.train_attack(feats, labels, _rng(cfg.seed, self.repeat, "attack", name, mode),
                                                   attack_config(cfg))
        return _FamilyContext(baseline, attackers)


# ---------------------------------------------------------------------------
# Algorithms
# ---------------------------------------------------------------------------


@dataclass
class CellOutcome:
    model: Model
    eps_spent: float | None
    sigma: float | None
    eval_idx: np.ndarray  # accuracy and non-member set
    convention: str = "unbounded"
    ledger: PrivacyLedger | None = None

    def __post_init__(self):
        # an empty ledger reads 0; a run with no noise at all is not private
        if self.ledger is not None and not self.ledger.budget.is_private:
            self.eps_spent = math.inf


def _train_private(ctx: RepeatContext, alg: str, eps: float, rng) -> CellOutcome:
    cfg, ds, plan = ctx.cfg, ctx.ds, ctx.plan
    fam = _family(alg)
    net, pre = family_net(cfg, ds, fam)
    model = Model(net, [], pre)
    x_all = model.inputs(ds.x)
    tx, ty = x_all[plan.target_train], ds.y[plan.target_train]
    n = len(tx)
    privacy = PrivacySpec(eps, cfg.delta)
    ledger = PrivacyLedger(privacy)
    tcfg = base_train_config(cfg)
    opts = cfg.algo(alg)

    if alg == "focal-loss":
        e_t = opts["e_t"] if opts["e_t"] is not None else cfg.train.epochs / 2
        tcfg = replace(tcfg, loss=nn.LossSpec("composite", opts["gamma"], e_t, opts["beta"]))
    elif alg == "adp-clip":
        tcfg = replace(tcfg, clip=ClipPolicy("adaptive", min(max(cfg.train.clip, opts["c_min"]), opts["c_max"]),
                                             opts["gamma"], opts["eta"], opts["sigma_b"], opts["c_min"], opts["c_max"]))
    elif alg == "adp-alloc":
        tcfg = replace(tcfg, noise=NoiseSchedule("exp-decay", 0.0, opts["k"]))
    elif alg == "rgp":
        tcfg = replace(tcfg, method="rgp", rgp_rank=opts["rank"])
    elif alg == "gep":
        tcfg = replace(tcfg, method="gep", gep_bases=opts["num_bases"], gep_groups=opts["num_groups"],
                       gep_power_iters=opts["power_iters"], gep_resid_ratio=opts["resid_ratio"],
                       gep_public_size=opts["public_size"])

    if alg in ("dpsgd", "tanh-act", "focal-loss", "hand-dp", "adp-clip", "adp-alloc", "rgp", "gep"):
        tcfg = calibrate_training(tcfg, privacy, n)
        pub = plan.public
        res = train(net, nn.init_params(net, rng), tx, ty, tcfg, rng, ledger,
                    public_x=x_all[pub], public_y=ds.y[pub])
        model.params = res.params
        return CellOutcome(model, ledger.epsilon(), tcfg.noise.sigma, plan.target_test, ledger=ledger)

    if alg in ENSEMBLES:
        public = plan.public
        if len(public) == 0:
            raise Unavailable("no public data")
        queries = opts["queries"] or len(public)
        nq = min(queries, len(public))
        if alg == "pate":
            if opts["teachers"] > n:
                raise Unavailable(f"{opts['teachers']} teachers for {n} private samples")
            sigma = ensemble.calibrate_pate(privacy, nq)
            teachers = ensemble.train_teachers(tx, ty, opts["teachers"], net, tcfg, rng)
            labeled = ensemble.pate_label_public(teachers, x_all[public], sigma, nq, ledger, rng)
        else:
            rounds = opts["rounds"]
            sigma = ensemble.calibrate_privknn(privacy, nq, opts["sample_prob"])
            labeled = _privknn_rounds(tx, ty, x_all[public], opts, sigma, nq, rounds, ledger, rng, net, tcfg,
                                      ds.num_classes)
        sx = x_all[public][labeled.queried]
        model.params = ensemble.train_student(sx, labeled.queried_labels, net, tcfg, rng)
        return CellOutcome(model, ledger.epsilon(), sigma, plan.holdout, ledger=ledger)

    if alg == "privset":
        private = data.Dataset(tx, ty, ds.num_classes, ds.name)
        condensed = data.privset_condense(private, opts["samples_per_class"], privacy, net, rng,
                                          iterations=opts["iterations"], batch_size=opts["batch_size"],
                                          C=cfg.train.clip, lr=opts["lr"], ledger=ledger)
        scfg = replace(tcfg, batch_size=min(tcfg.batch_size, len(condensed)))
        model.params = train_nonprivate(net, nn.init_params(net, rng), condensed.x, condensed.y, scfg, rng)
        return CellOutcome(model, ledger.epsilon(), condensed.meta["sigma"], plan.target_test, ledger=ledger)

    if alg in LABEL_DP:
        label_eps = convert_convention(eps, "unbounded", "bounded")
        if alg == "lp-mst":
            model.params, _ = labeldp.lp_mst_train(tx, ty, ds.num_classes, label_eps, opts["stages"], net, tcfg, rng)
        else:
            model.params, _ = labeldp.alibi_train(tx, ty, ds.num_classes, label_eps, net, tcfg, rng)
        return CellOutcome(model, label_eps, None, plan.target_test, convention="bounded")

    raise ConfigError(f"unknown algorithm {alg!r}")  # pragma: no cover


def _privknn_rounds(tx, ty, public_x, opts, sigma, nq, rounds, ledger, rng, net, tcfg, k):
    """Label public points in ``rounds`` chunks; later rounds search in the
    hidden space of the student trained on earlier labels."""
    chunks = np.array_split(np.arange(nq), rounds)
    labels = np.full(len(public_x), -1)
    feature_fn = None
    for chunk in chunks:
        if len(chunk) == 0:
            continue
        part = ensemble.privknn_label_public(tx, ty, public_x[chunk], opts["k"], opts["sample_prob"], sigma,
                                            len(chunk), ledger, rng, feature_fn, k)
        labels[chunk] = part.label
        done = np.flatnonzero(labels >= 0)
        student = ensemble.train_student(public_x[done], labels[done], net, tcfg, rng)
        feature_fn = (lambda s: (lambda a: nn.hidden_features(net, s, a)))(student)
    was = labels >= 0
    return ensemble.LabeledPublic(np.arange(len(public_x)), labels, was)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def _empty_row(cfg, alg, eps, repeat, stat="value"):
    row = {c: None for c in RESULT_COLUMNS}
    row.update(experiment=cfg.name, algorithm=alg, epsilon=eps, repeat=repeat, stat=stat, status="ok",
               convention="unbounded", message="")
    return row


def run_cell(ctx: RepeatContext, alg: str, eps: float) -> tuple[dict, CellOutcome | None]:
    cfg, ds, plan = ctx.cfg, ctx.ds, ctx.plan
    row = _empty_row(cfg, alg, eps, ctx.repeat)
    stage = "baseline"
    try:
        fam = ctx.family(_family(alg))
        stage = "train"
        if alg == "non-private":
            outcome = CellOutcome(fam.baseline, math.inf, 0.0, plan.target_test)
        else:
            outcome = _train_private(ctx, alg, eps, _rng(cfg.seed, ctx.repeat, alg, repr(eps)))
        stage = "evaluate"
        model, base = outcome.model, fam.baseline
        ev = outcome.eval_idx
        x_all = model.inputs(ds.x)
        xb_all = base.inputs(ds.x)
        row["accuracy"] = nn.accuracy(model.net, model.params, x_all[ev], ds.y[ev])
        row["baseline_accuracy"] = nn.accuracy(base.net, base.params, xb_all[ev], ds.y[ev])
        row["utility_loss"] = utility_loss(row["accuracy"], row["baseline_accuracy"])
        row["eps_spent"] = outcome.eps_spent
        row["sigma"] = outcome.sigma
        row["convention"] = outcome.convention
        stage = "attack"
        for mode, att in fam.attackers.items():
            raw, _, _ = attacks.evaluate_attack(att, model.net, model.params, x_all, ds.y, plan.target_train, ev)
            braw, _, _ = attacks.evaluate_attack(att, base.net, base.params, xb_all, ds.y, plan.target_train, ev)
            t, bt = tailored_auc(raw), tailored_auc(braw)
            row[f"auc_{mode}"] = raw
            row[f"tailored_auc_{mode}"] = t
            row[f"baseline_auc_{mode}"] = bt
            row[f"leakage_{mode}"] = privacy_leakage(t, bt)
        return row, outcome
    except Unavailable as exc:
        row.update(status="unavailable", message=str(exc))
    except (DpmlBenchError, ArithmeticError, ValueError) as exc:
        row.update(status=f"failed:{stage}", message=f"{type(exc).__name__}: {exc}")
    return row, None


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and sample std rows for every (algorithm, epsilon) group of ok rows."""
    out = []
    keys = []
    for r in rows:
        k = (r["algorithm"], r["epsilon"])
        if k not in keys:
            keys.append(k)
    for alg, eps in keys:
        group = [r for r in rows if r["algorithm"] == alg and r["epsilon"] == eps
                 and r["status"] == "ok" and r["stat"] == "value"]
        if not group:
            continue
        mean = dict(group[0], repeat=None, stat="mean", message="")
        std = dict(group[0], repeat=None, stat="std", message="")
        for c in NUMERIC_COLUMNS:
            vals = [r[c] for r in group if r[c] is not None]
            if c == "epsilon":
                continue
            if not vals:
                mean[c] = std[c] = None
                continue
            arr = np.asarray(vals, dtype=float)
            mean[c] = float(arr.mean())
            if not np.all(np.isfinite(arr)):
                std[c] = None
            else:
                std[c] = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        out += [mean, std]
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[dict]
    summary: list[dict]
    wall_time: float
    ledgers: dict[str, PrivacyLedger] = field(default_factory=dict)

    def all_rows(self) -> list[dict]:
        return self.rows + self.summary

    def select(self, algorithm: str, epsilon: float | None = None, stat: str = "mean") -> list[dict]:
        return [r for r in self.all_rows() if r["algorithm"] == algorithm and r["stat"] == stat
                and (epsilon is None or r["epsilon"] == epsilon)]


def run_experiment(cfg: ExperimentConfig, out_dir=None, save_models: bool = False) -> ExperimentResult:
    """Run every (algorithm, epsilon, repeat) cell; persist results if ``out_dir`` is given.

    The non-private algorithm ignores the epsilon grid and runs once per
    repeat with ``epsilon = inf``.
    """
    t0 = time.perf_counter()
    ds = load_dataset(cfg)
    rows, ledgers = [], {}
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for repeat in range(cfg.repeats):
        ctx = RepeatContext(cfg, ds, repeat)
        if save_models and out is not None:
            write_plan(out / f"plan_r{repeat}.json", cfg, ctx.plan)
        for alg in cfg.algorithms:
            grid = (math.inf,) if alg == "non-private" else cfg.epsilons
            for eps in grid:
                row, outcome = run_cell(ctx, alg, eps)
                rows.append(row)
                if outcome is not None and outcome.ledger is not None:
                    ledgers[f"{alg}_eps{eps}_r{repeat}"] = outcome.ledger
                if outcome is not None and save_models and out is not None:
                    (out / "models").mkdir(exist_ok=True)
                    outcome.model.save(out / "models" / f"{alg}_eps{eps}_r{repeat}.npz")
        if out is not None:  # persist partial progress after each repeat
            write_results(out / f"{cfg.name}.csv", rows + aggregate(rows))
    result = ExperimentResult(cfg, rows, aggregate(rows), time.perf_counter() - t0, ledgers)
    if out is not None:
        write_results(out / f"{cfg.name}.csv", result.all_rows())
        write_manifest(out / "manifest.json", result)
        tdir = out / "traces"
        tdir.mkdir(exist_ok=True)
        for name, ledger in ledgers.items():
            ledger.write_csv(tdir / f"{name}.csv")
    return result


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "inf" if math.isinf(v) and v > 0 else repr(float(v))
    return str(v)


def results_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in RESULT_COLUMNS])
    return buf.getvalue()


def write_results(path, rows: list[dict]) -> None:
    Path(path).write_text(results_csv(rows))


def read_results(path) -> list[dict]:
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read results {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_COLUMNS:
            raise ConfigError(f"{path}: unexpected result columns")
        rows = []
        for r in reader:
            row: dict[str, Any] = dict(r)
            for c in NUMERIC_COLUMNS:
                row[c] = float(r[c]) if r[c] != "" else None
            row["repeat"] = int(r["repeat"]) if r["repeat"] != "" else None
            rows.append(row)
    return rows


def write_manifest(path, result: ExperimentResult) -> None:
    cfg = result.config
    manifest = {
        "experiment": cfg.name,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "repeats": cfg.repeats,
        "wall_time_s": round(result.wall_time, 3),
        "versions": {"dpmlbench": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "config": cfg.to_dict(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def write_plan(path, cfg: ExperimentConfig, plan: data.SplitPlan) -> None:
    """Everything the standalone attack command needs to rebuild shadow and attack models."""
    doc = {"config": cfg.to_dict(), "seed": cfg.seed,
           "split": {k: getattr(plan, k).tolist() for k in
                     ("target_train", "target_test", "shadow_train", "shadow_test", "public")}}
    Path(path).write_text(json.dumps(doc, sort_keys=True, default=str) + "\n")


def read_plan(path) -> tuple[ExperimentConfig, data.SplitPlan]:
    from .config import config_from_dict

    try:
        doc = json.loads(Path(path).read_text())
        c = doc["config"]
        raw = {
            "experiment": {"name": c["name"], "algorithms": list(c["algorithms"]), "epsilons": c["epsilons"],
                           "delta": c["delta"], "repeats": c["repeats"], "seed": c["seed"]},
            "data": {k: v for k, v in c["data"].items()},
            "net": {k: (list(v) if isinstance(v, (list, tuple)) else v) for k, v in c["net"].items()},
            "train": c["train"], "attack": {k: (list(v) if isinstance(v, (list, tuple)) else v)
                                            for k, v in c["attack"].items()},
            "algorithms": c.get("options", {}),
        }
        cfg = config_from_dict(raw)
        split = {k: np.asarray(v, dtype=int) for k, v in doc["split"].items()}
        plan = data.SplitPlan(**split)
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read plan {path}: {exc}") from None
    return cfg, plan


def attack_saved_model(model_path, plan_path, mode: str) -> dict:
    """Train a shadow and attacker per the plan and score a saved model."""
    cfg, plan = read_plan(plan_path)
    if mode not in attacks.MODES:
        raise ConfigError(f"unknown attack mode {mode!r}")
    model = Model.load(model_path)
    ds = load_dataset(cfg)
    tcfg = base_train_config(cfg)
    rng = _rng(cfg.seed, "cli-attack", mode)
    x_all = model.inputs(ds.x)
    shadow_params = train_nonprivate(model.net, nn.init_params(model.net, rng), x_all[plan.shadow_train],
                                     ds.y[plan.shadow_train], tcfg, rng)
    feats, labels = attacks.membership_features(model.net, shadow_params, x_all, ds.y,
                                                plan.shadow_train, plan.shadow_test, mode)
    att = attacks.train_attack(feats, labels, rng, attack_config(cfg))
    raw, _, _ = attacks.evaluate_attack(att, model.net, model.params, x_all, ds.y, plan.target_train,
                                        plan.target_test)
    return {"mode": mode, "auc": raw, "tailored_auc": tailored_auc(raw)}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _collect(source) -> list[dict]:
    if isinstance(source, (str, Path)):
        p = Path(source)
        files = sorted(p.glob("*.csv")) if p.is_dir() else [p]
        files = [f for f in files if f.name != "report.csv"]
        rows = []
        for f in files:
            rows += read_results(f)
        if not rows:
            raise ConfigError(f"no result CSVs found in {source}")
        return rows
    rows = list(source)
    if not rows:
        raise ConfigError("report needs at least one result")
    return rows


def emit_report(source, fmt: str, out_dir) -> list[Path]:
    """Summary CSV, or SVG line charts of accuracy and black-box leakage against epsilon."""
    rows = _collect(source)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    means = [r for r in rows if r["stat"] == "mean"]
    if fmt == "csv":
        path = out / "report.csv"
        write_results(path, means)
        return [path]
    if fmt == "svg":
        paths = []
        for metric, title in (("accuracy", "Accuracy"), ("leakage_black", "Privacy leakage (black-box)")):
            path = out / f"{metric}.svg"
            path.write_text(svg_chart(means, metric, title))
            paths.append(path)
        return paths
    raise ConfigError(f"unknown report format {fmt!r}")


_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39"]


def svg_chart(rows: list[dict], metric: str, title: str, width: int = 640, height: int = 400) -> str:
    """One polyline per algorithm over finite epsilons on a log x axis."""
    from xml.sax.saxutils import escape

    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        e, v = r["epsilon"], r.get(metric)
        if e is None or v is None or not math.isfinite(e) or not math.isfinite(v):
            continue
        series.setdefault(r["algorithm"], []).append((e, v))
    pts = [p for s in series.values() for p in s]
    left, right, top, bottom = 60, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    if pts:
        lx = [math.log10(p[0]) for p in pts]
        x0, x1 = min(lx), max(lx)
        y0, y1 = min(0.0, min(p[1] for p in pts)), max(1.0, max(p[1] for p in pts))
    else:
        x0, x1, y0, y1 = -1.0, 3.0, 0.0, 1.0
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5

    def sx(e):
        return left + (math.log10(e) - x0) / (x1 - x0) * pw

    def sy(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for dec in range(math.floor(x0), math.ceil(x1) + 1):
        if x0 <= dec <= x1:
            x = sx(10.0**dec)
            parts.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" y2="{top + ph + 5}" stroke="#444"/>')
            parts.append(f'<text x="{x:.1f}" y="{top + ph + 18}" text-anchor="middle" font-size="11">'
                         f'{10.0**dec:g}</text>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = y0 + frac * (y1 - y0)
        parts.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end" font-size="11">{v:.2f}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">'
                 f'epsilon (log scale)</text>')
    for i, (alg, s) in enumerate(sorted(series.items())):
        s = sorted(s)
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(e):.1f},{sy(v):.1f}" for e, v in s)
        parts.append(f'<polyline class="series" data-algorithm="{escape(alg)}" fill="none" stroke="{color}" '
                     f'stroke-width="2" points="{coords}"/>')
        ly = top + 14 * (i + 1)
        parts.append(f'<text x="{left + pw + 10}" y="{ly}" font-size="11" fill="{color}">{escape(alg)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def run_from_file(config_path, out_dir=None, repeats=None, seed=None, save_models=False) -> ExperimentResult:
    cfg = load_config(config_path)
    if repeats is not None:
        if repeats < 1:
            raise ConfigError("--repeats must be >= 1")
        cfg = replace(cfg, repeats=repeats)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return run_experiment(cfg, out_dir, save_models)
