"""Command-line entry point: run, report, calibrate, attack.

Exit codes: 0 ok, 2 configuration error, 3 budget error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

from .errors import ConfigError, DpmlBenchError


def _float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpmlbench", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--repeats", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="results")
    r.add_argument("--save-models", action="store_true", help="also write model .npz files and split plans")

    rep = sub.add_parser("report", help="summarize result CSVs")
    rep.add_argument("--in", dest="src", required=True)
    rep.add_argument("--format", choices=("csv", "svg"), default="csv")
    rep.add_argument("--out", help="output directory (defaults to --in)")

    c = sub.add_parser("calibrate", help="print the noise multiplier for a DP-SGD run")
    c.add_argument("--eps", type=_float, required=True)
    c.add_argument("--delta", type=_float, default=1e-5)
    c.add_argument("--q", type=_float, required=True)
    c.add_argument("--steps", type=int, required=True)

    a = sub.add_parser("attack", help="membership-inference AUC of a saved model")
    a.add_argument("--model", required=True)
    a.add_argument("--plan", required=True)
    a.add_argument("--mode", choices=("black", "white"), default="black")
    return p


def _run(args) -> int:
    from .harness import run_from_file

    result = run_from_file(args.config, args.out, args.repeats, args.seed, args.save_models)
    failed = [r for r in result.rows if r["status"] != "ok"]
    for r in failed:
        print(f"{r['algorithm']} eps={r['epsilon']} repeat={r['repeat']}: {r['status']} {r['message']}",
              file=sys.stderr)
    print(f"{len(result.rows) - len(failed)}/{len(result.rows)} cells ok in {result.wall_time:.1f}s; "
          f"results in {args.out}")
    return 0


def _report(args) -> int:
    from .harness import emit_report

    for path in emit_report(args.src, args.format, args.out or args.src):
        print(path)
    return 0


def _calibrate(args) -> int:
    from .accountant import PrivacySpec, calibrate_sigma

    if not 0 < args.q <= 1:
        raise ConfigError("--q must lie in (0, 1]")
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    if not (args.eps > 0 and 0 < args.delta < 1):
        raise ConfigError("--eps must be positive and --delta in (0, 1)")
    sigma = calibrate_sigma(PrivacySpec(args.eps, args.delta), args.q, args.steps)
    print(repr(sigma) if math.isfinite(args.eps) else "0.0")
    return 0


def _attack(args) -> int:
    from .harness import attack_saved_model

    print(json.dumps(attack_saved_model(args.model, args.plan, args.mode)))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": _run, "report": _report, "calibrate": _calibrate, "attack": _attack}[args.command]
    try:
        return handler(args)
    except DpmlBenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ArithmeticError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
