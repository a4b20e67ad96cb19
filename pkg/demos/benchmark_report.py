"""
A full benchmark run from a config file
=======================================

Runs one repeat of the trend experiment used by the acceptance suite
(non-private baseline, DP-SGD over a budget grid, two label-DP methods),
writes the result CSV and manifest, and renders SVG charts.

    python demos/benchmark_report.py [out_dir]
"""

import math
import sys
from dataclasses import replace
from pathlib import Path

from dpmlbench.config import load_config
from dpmlbench.harness import emit_report, run_experiment

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_results")
cfg = load_config(Path(__file__).parents[1] / "tests" / "data" / "trend.toml")
# one repeat instead of five keeps the demo under a minute
cfg = replace(cfg, repeats=1)

result = run_experiment(cfg, out)
print(f"{len(result.rows)} cells in {result.wall_time:.0f}s")
print(f"{'algorithm':>12} {'eps':>6} {'acc':>6} {'util loss':>9} {'AUC':>6} {'leakage':>8}")
for r in result.summary:
    if r["stat"] != "mean":
        continue
    eps = "inf" if math.isinf(r["epsilon"]) else f"{r['epsilon']:g}"
    leak = r["leakage_black"]
    print(f"{r['algorithm']:>12} {eps:>6} {r['accuracy']:6.3f} {r['utility_loss']:9.3f} "
          f"{r['tailored_auc_black']:6.3f} {'-' if leak is None else f'{leak:8.3f}':>8}")

for path in emit_report(out, "svg", out):
    print("wrote", path)
