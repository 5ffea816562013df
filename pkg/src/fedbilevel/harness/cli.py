"""``fedbilevel run | sweep | verify``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..algorithms import StepSizeError
from ..federation import DivergenceError
from ..problems import UnsupportedCapability
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import AXES, run_experiment, run_sweep, write_run_csv, write_sweep_csv
from .verify import verify

log = logging.getLogger("fedbilevel")


def _seeds(raw: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(s) for s in raw.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds: {raw!r} is not a comma-separated list of integers") from None
    if not vals:
        raise argparse.ArgumentTypeError("--seeds: empty list")
    return vals


def _values(raw: str) -> list[str]:
    return [v.strip() for v in raw.split(",") if v.strip()]


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seeds is not None:
        cfg = replace(cfg, federation=replace(cfg.federation, seeds=args.seeds))
    return cfg


def _emit(text: str, out: str | None):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")
        log.info("wrote %s", out)


def cmd_run(args) -> int:
    cfg = _load(args)
    results = run_experiment(cfg, workers=args.workers)
    _emit(write_run_csv(cfg, results), args.out or cfg.output)
    return 0


def cmd_sweep(args) -> int:
    cfg = _load(args)
    rows = run_sweep(cfg, args.axis, _values(args.values), args.epsilon, workers=args.workers)
    _emit(write_sweep_csv(args.axis, rows, args.epsilon, timing=args.timing), args.out)
    return 0


def cmd_verify(args) -> int:
    checks = verify(fault_inject=args.fault_inject)
    for c in checks:
        log.info("%-4s %-36s measured=%.6g threshold=%.6g", "ok" if c.passed else "FAIL", c.name, c.measured, c.threshold)
    report = {"passed": all(c.passed for c in checks), "checks": [c.as_dict() for c in checks]}
    _emit(json.dumps(report, indent=2) + "\n", args.out)
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedbilevel", description="Federated bilevel optimization simulator.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="INI experiment configuration")
        p.add_argument("--out", help="output CSV ('-' for stdout)")
        p.add_argument("--seeds", type=_seeds, help="comma-separated seeds, overriding the config")
        p.add_argument("--workers", type=int, default=None, help="parallel processes over seeds / sweep points")

    p = sub.add_parser("run", help="multi-seed run, one CSV row per iteration per seed")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one axis and report iterations/samples/rounds to epsilon")
    common(p)
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--values", required=True, help="comma-separated values; algorithm values take 'Name[:manual|Variant]'")
    p.add_argument("--epsilon", type=float, required=True, help="target for the seed-averaged running metric")
    p.add_argument("--timing", action="store_true", help="add a wall_time column (breaks byte-identical output)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the invariant suite and print a JSON report")
    p.add_argument("--out", help="report path ('-' for stdout)")
    p.add_argument("--fault-inject", action="store_true", help="flip the sign of the implicit hypergradient term")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
    except (StepSizeError, UnsupportedCapability) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
