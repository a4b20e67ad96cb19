import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from dpmlbench import harness, nn
from dpmlbench.cli import main
from dpmlbench.config import ALGORITHMS, loads_config
from dpmlbench.data import write_idx
from dpmlbench.harness import (RESULT_COLUMNS, Model, emit_report, read_results, results_csv,
                               run_experiment, svg_chart)

SMALL = """
[experiment]
name = "small"
algorithms = {algs}
epsilons = {eps}
repeats = {repeats}
seed = 3

[data]
n_per_class = 40
classes = 3
dim = 4
separation = 3.0

[net]
hidden = [12]

[train]
lr = 0.3
epochs = 3
batch_size = 10

[attack]
epochs = 3

[algorithms.pate]
teachers = 4
queries = 12

[algorithms.priv-knn]
k = 3
sample_prob = 0.6
queries = 12
rounds = 2

[algorithms.privset]
samples_per_class = 3
iterations = 4

[algorithms.gep]
num_bases = 4
public_size = 16

[algorithms.rgp]
rank = 2
"""


def _toml_eps(eps):
    return "[" + ", ".join('"inf"' if math.isinf(e) else repr(e) for e in eps) + "]"


def small_text(algs=("dpsgd", "non-private"), eps=(2.0,), repeats=1):
    return SMALL.format(algs=json.dumps(list(algs)), eps=_toml_eps(eps), repeats=repeats)


def small_cfg(*args, **kw):
    return loads_config(small_text(*args, **kw))


@pytest.fixture(scope="module")
def every_algorithm():
    return run_experiment(small_cfg(ALGORITHMS, (2.0,)))


def test_every_algorithm_runs(every_algorithm):
    by_alg = {r["algorithm"]: r for r in every_algorithm.rows}
    assert set(by_alg) == set(ALGORITHMS)
    # fixed Haar features need image data; blobs are flat vectors
    assert by_alg["hand-dp"]["status"] == "unavailable"
    assert by_alg["hand-dp"]["accuracy"] is None
    for alg, r in by_alg.items():
        if alg == "hand-dp":
            continue
        assert r["status"] == "ok", (alg, r["message"])
        assert 0 <= r["accuracy"] <= 1
        for mode in ("black", "white"):
            assert r[f"tailored_auc_{mode}"] >= 0.5
            assert r[f"leakage_{mode}"] is None or r[f"leakage_{mode}"] >= 0
        if alg in ("lp-mst", "alibi"):
            assert r["convention"] == "bounded" and r["eps_spent"] == 4.0
        elif alg == "non-private":
            assert r["epsilon"] == math.inf and r["eps_spent"] == math.inf
            assert r["utility_loss"] == 0.0
        else:
            assert r["eps_spent"] <= 2.0, alg


def test_image_data_enables_hand_dp(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(2), 40).astype(np.uint8)
    imgs = (rng.random((80, 8, 8)) * 60).astype(np.uint8)
    imgs[y == 1, :4] += 150
    write_idx(tmp_path / "x.idx", imgs)
    write_idx(tmp_path / "y.idx", y)
    cfg = loads_config(f"""
[experiment]
algorithms = ["hand-dp", "dpsgd"]
epsilons = [4.0]
repeats = 1
[data]
kind = "idx"
images = "{tmp_path / 'x.idx'}"
labels = "{tmp_path / 'y.idx'}"
[net]
kind = "cnn"
filters = [2]
hidden = [8]
[train]
epochs = 2
batch_size = 10
[attack]
epochs = 2
[algorithms.hand-dp]
hidden = [8]
""")
    res = run_experiment(cfg)
    assert [r["status"] for r in res.rows] == ["ok", "ok"]
    assert res.rows[0]["eps_spent"] <= 4.0


def test_aggregate_and_csv_round_trip(tmp_path):
    res = run_experiment(small_cfg(("dpsgd", "non-private"), (1.0, math.inf), repeats=2), tmp_path)
    assert len(res.rows) == 2 * 2 + 2
    mean = res.select("dpsgd", 1.0)[0]
    vals = [r["accuracy"] for r in res.rows if r["algorithm"] == "dpsgd" and r["epsilon"] == 1.0]
    assert mean["accuracy"] == pytest.approx(np.mean(vals))
    std = res.select("dpsgd", 1.0, "std")[0]
    assert std["accuracy"] == pytest.approx(np.std(vals, ddof=1))
    # eps=inf means clipping without noise: no finite guarantee
    clip_only = res.select("dpsgd", math.inf)[0]
    assert clip_only["sigma"] == 0.0 and clip_only["eps_spent"] == math.inf
    assert res.select("non-private", None, "std")[0]["eps_spent"] is None

    back = read_results(tmp_path / "small.csv")
    assert len(back) == len(res.all_rows())
    for a, b in zip(res.all_rows(), back):
        for c in harness.NUMERIC_COLUMNS:
            assert a[c] == b[c] or (a[c] is not None and b[c] is not None and math.isnan(a[c]) and math.isnan(b[c]))
    # missing values are empty cells, never zeros
    header, first = (tmp_path / "small.csv").read_text().splitlines()[:2]
    assert header.split(",") == RESULT_COLUMNS
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config_hash"] == res.config.digest()
    assert manifest["seed"] == 3 and manifest["repeats"] == 2
    assert {"numpy", "scipy", "python", "dpmlbench"} <= set(manifest["versions"])
    traces = sorted(p.name for p in (tmp_path / "traces").iterdir())
    assert "dpsgd_eps1.0_r0.csv" in traces


def test_unavailable_cells_have_empty_metrics():
    row = harness._empty_row(small_cfg(), "hand-dp", 1.0, 0)
    row.update(status="unavailable")
    line = results_csv([row]).splitlines()[1].split(",")
    cells = dict(zip(RESULT_COLUMNS, line))
    assert cells["accuracy"] == "" and cells["leakage_black"] == "" and cells["status"] == "unavailable"


def test_read_results_rejects_foreign_csv(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(harness.ConfigError):
        read_results(tmp_path / "x.csv")


def test_runs_are_deterministic(tmp_path):
    cfg = small_cfg(("dpsgd", "alibi"), (1.0,))
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "small.csv").read_bytes() == (tmp_path / "b" / "small.csv").read_bytes()


def test_cells_do_not_depend_on_neighbours():
    alone = run_experiment(small_cfg(("dpsgd",), (1.0,)))
    crowded = run_experiment(small_cfg(("alibi", "dpsgd"), (4.0, 1.0)))
    a = alone.rows[0]
    b = [r for r in crowded.rows if r["algorithm"] == "dpsgd" and r["epsilon"] == 1.0][0]
    assert a["accuracy"] == b["accuracy"] and a["auc_black"] == b["auc_black"]


def test_svg_chart_is_well_formed():
    rows = [{"algorithm": alg, "epsilon": e, "accuracy": v, "stat": "mean"}
            for alg in ("dpsgd", "a&b") for e, v in ((0.5, 0.3), (8.0, 0.7), (math.inf, 0.9))]
    root = ET.fromstring(svg_chart(rows, "accuracy", "Accuracy <test>"))
    series = root.findall("{http://www.w3.org/2000/svg}polyline")
    assert sorted(s.get("data-algorithm") for s in series) == ["a&b", "dpsgd"]
    assert all(len(s.get("points").split()) == 2 for s in series)
    ET.fromstring(svg_chart([], "accuracy", "empty"))


def test_model_save_load(tmp_path, rng):
    net = nn.mlp(3, [4], 2)
    m = Model(net, nn.init_params(net, rng), "flatten")
    m.save(tmp_path / "m.npz")
    back = Model.load(tmp_path / "m.npz")
    assert back.net == net and back.preprocess == "flatten"
    for a, b in zip(m.params, back.params):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(harness.ConfigError):
        Model.load(tmp_path / "missing.npz")
    other = nn.mlp(3, [5], 2)
    np.savez(tmp_path / "bad.npz", net=np.array(nn.dumps_spec(other)), preprocess=np.array("none"), p0=np.zeros(1))
    with pytest.raises(harness.ConfigError, match="do not match"):
        Model.load(tmp_path / "bad.npz")


# --- command line -----------------------------------------------------------


def _write_config(tmp_path, algs=("dpsgd", "non-private"), eps=(2.0,)):
    p = tmp_path / "c.toml"
    p.write_text(small_text(algs, eps))
    return p


def test_cli_run_report_attack(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--save-models", "--seed", "5"]) == 0
    assert "2/2 cells ok" in capsys.readouterr().out
    assert json.loads((out / "manifest.json").read_text())["seed"] == 5

    assert main(["report", "--in", str(out), "--format", "csv"]) == 0
    rows = read_results(out / "report.csv")
    assert {r["stat"] for r in rows} == {"mean"}
    assert main(["report", "--in", str(out), "--format", "svg"]) == 0
    for name in ("accuracy.svg", "leakage_black.svg"):
        ET.fromstring((out / name).read_text())

    capsys.readouterr()
    model = out / "models" / "dpsgd_eps2.0_r0.npz"
    assert main(["attack", "--model", str(model), "--plan", str(out / "plan_r0.json"), "--mode", "white"]) == 0
    got = json.loads(capsys.readouterr().out)
    assert got["mode"] == "white" and 0 <= got["auc"] <= 1 and got["tailored_auc"] >= 0.5


def test_cli_calibrate(capsys):
    assert main(["calibrate", "--eps", "1.0", "--q", "0.01", "--steps", "1000"]) == 0
    sigma = float(capsys.readouterr().out)
    from dpmlbench.accountant import SubsampledGaussian, epsilon_of
    assert 1.0 * (1 - 1e-3) <= epsilon_of([SubsampledGaussian(0.01, sigma, 1000)]) <= 1.0


@pytest.mark.parametrize("argv, code", [
    (["calibrate", "--eps", "1", "--q", "1.5", "--steps", "10"], 2),
    (["calibrate", "--eps", "-1", "--q", "0.1", "--steps", "10"], 2),
    (["calibrate", "--eps", "1e-6", "--q", "1.0", "--steps", "100000"], 3),
    (["run", "--config", "does-not-exist.toml"], 2),
    (["report", "--in", "does-not-exist"], 2),
])
def test_cli_exit_codes(argv, code, capsys):
    assert main(argv) == code
    assert "error" in capsys.readouterr().err


def test_cli_bad_config_names_key(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text("[train]\nlr = 'fast'\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "train.lr" in capsys.readouterr().err


def test_cli_usage_error_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["calibrate", "--eps", "abc", "--q", "0.1", "--steps", "1"])
    assert info.value.code == 2
