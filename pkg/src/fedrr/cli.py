"""Command line entry point: ``fedrr calibrate | run | lowrank | replay-trace | config``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from fedrr import config as cfgmod
from fedrr.calibration import CalibrationConfig, search_limit
from fedrr.errors import ConfigError, NumericalError
from fedrr.experiment import (
    REPORT_NAME,
    compare_variants,
    replay_trace,
    resolve_output_dir,
    run_experiment,
    run_lowrank_diagnostic,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _load_config(args) -> cfgmod.ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either a config file or --preset, not both")
    cfg = cfgmod.load(args.config) if args.config else cfgmod.preset(args.preset or "desk")
    overrides = dict(cfgmod.parse_override(item) for item in args.set or [])
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    if getattr(args, "replications", None) is not None:
        overrides["replications"] = args.replications
    return cfg.replace(**overrides) if overrides else cfg


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="YAML experiment config")
    p.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="start from a built-in preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")


def _print_json(payload) -> None:
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def cmd_calibrate(args) -> int:
    cc = CalibrationConfig(
        K=args.K,
        d=args.d,
        arl0=args.arl0,
        replications=args.replications,
        max_rounds=args.max_rounds,
        h_lo=args.h_lo,
        h_hi=args.h_hi,
        tolerance=args.tolerance,
        rng_seed=args.seed,
        allowance_rule=args.allowance,
        workers=args.workers,
    )
    record = search_limit(cc).record()
    if args.output:
        Path(args.output).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    _print_json(record)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    if args.compare:
        reports = compare_variants(cfg)
        _print_json({v: {"H": r.H, **r.summary()} for v, r in reports.items()})
    else:
        report = run_experiment(cfg)
        _print_json({"H": report.H, **report.summary()})
    print(f"outputs in {resolve_output_dir(cfg)}", file=sys.stderr)
    return EXIT_OK


def cmd_lowrank(args) -> int:
    cfg = _load_config(args)
    rows = run_lowrank_diagnostic(cfg)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
    return EXIT_OK


def cmd_replay(args) -> int:
    trace = Path(args.trace)
    if not trace.is_file():
        raise ConfigError(f"no trace file at {trace}")
    params = {}
    report = Path(args.report) if args.report else trace.with_name(REPORT_NAME)
    if report.exists():
        params = json.loads(report.read_text())["monitor"]
    d = args.d if args.d is not None else params.get("d")
    H = args.H if args.H is not None else params.get("H")
    if d is None or H is None:
        raise ConfigError("need d and H: pass --d/--H or keep report.json next to the trace")
    rule = args.allowance or params.get("allowance_rule", "half")
    reset = args.reset_on_alarm or not params.get("stop_on_alarm", True)
    result = replay_trace(trace, d, H, rule, reset)
    _print_json({"rows": result.rows, "ok": result.ok, "mismatches": result.mismatches})
    return EXIT_OK if result.ok else EXIT_NUMERICAL


def cmd_config(args) -> int:
    if args.schema:
        sys.stdout.write(cfgmod.SCHEMA_DOC)
        return EXIT_OK
    sys.stdout.write(cfgmod.emit(_load_config(args)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="find the control limit H for a target in-control ARL")
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--d", type=float, default=0.5)
    p.add_argument("--arl0", type=float, default=30.0)
    p.add_argument("--replications", "-M", type=int, default=10_000)
    p.add_argument("--max-rounds", type=int, default=1_000_000)
    p.add_argument("--h-lo", type=float, default=0.0)
    p.add_argument("--h-hi", type=float, default=8.0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allowance", choices=("half", "full"), default="half")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output", help="also write the JSON record here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="run an experiment (Phase I + Phase II per replication)")
    _add_config_args(p)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--replications", type=int)
    p.add_argument("--compare", action="store_true", help="monitor fedrr and norm_benchmark on matched trajectories")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("lowrank", help="components needed for 90/95/99%% variance vs. Phase I rounds")
    _add_config_args(p)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_lowrank)

    p = sub.add_parser("replay-trace", help="check a trace.csv against the CUSUM recursion")
    p.add_argument("trace")
    p.add_argument("--report", help="report.json holding d and H (default: next to the trace)")
    p.add_argument("--d", type=float)
    p.add_argument("--H", type=float)
    p.add_argument("--allowance", choices=("half", "full"))
    p.add_argument("--reset-on-alarm", action="store_true")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("config", help="print a config (preset + overrides) or the key schema")
    _add_config_args(p)
    p.add_argument("--schema", action="store_true")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
