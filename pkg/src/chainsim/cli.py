"""Command-line entry point for the experiment runners.

Exit codes: 0 success, 1 configuration error, 2 a verification check failed,
3 the run aborted after flushing partial results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import (
    ConfigError,
    ExperimentFailure,
    ExplainSweepConfig,
    FairnessSweepConfig,
    THREADS_ENV_VAR,
    TheorySuiteConfig,
    aggregate_file,
    load_config_file,
    run_explanation_experiment,
    run_fairness_sweep,
    run_theory_suite,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK_FAILED = 2
EXIT_PARTIAL = 3


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (defaults used otherwise)")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--out-dir", help="override the output directory")
    parser.add_argument("--threads", type=int,
                        help=f"worker count (default: ${THREADS_ENV_VAR} or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chainsim",
        description="Simulate model chains: explanation-fidelity sweeps, "
                    "bound verification, and fairness fine-tuning sweeps.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
            ("explain-sweep", "explanation fidelity over tree depth/degree grids"),
            ("theory", "numerical verification of the composition/fine-tune bounds"),
            ("fairness-sweep", "regularized training + fine-tuning trade-off sweep")):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
    agg = sub.add_parser("aggregate", help="recompute aggregates from a raw CSV")
    agg.add_argument("raw", help="path to a raw metrics CSV")
    agg.add_argument("--out", help="output CSV path (default: alongside the input)")
    return parser


_DEFAULTS = {
    "explain-sweep": ExplainSweepConfig,
    "theory": TheorySuiteConfig,
    "fairness-sweep": FairnessSweepConfig,
}


def _load(args: argparse.Namespace):
    if args.config:
        cfg = load_config_file(args.config)
        expected = _DEFAULTS[args.command]
        if not isinstance(cfg, expected):
            raise ConfigError(
                f"config kind {cfg.kind!r} does not match command {args.command!r}")
    else:
        cfg = _DEFAULTS[args.command]()
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if args.threads is not None:
        cfg.threads = args.threads
    cfg.validate()
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "aggregate":
            out = args.out or str(Path(args.raw).with_name("aggregate.csv"))
            rows = aggregate_file(args.raw, out)
            print(f"wrote {len(rows)} aggregate rows to {out}")
            return EXIT_OK
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "explain-sweep":
            manifest = run_explanation_experiment(cfg)
            print(json.dumps({k: manifest[k] for k in
                              ("experiment", "complete", "n_raw_rows", "runtime_sec")}))
            return EXIT_OK
        if args.command == "theory":
            report, ok = run_theory_suite(cfg)
            failed = [] if ok else [name for name, _ in report["checks"].items()]
            print(json.dumps({"all_passed": ok, "out_dir": cfg.out_dir}))
            return EXIT_OK if ok else EXIT_CHECK_FAILED
        if args.command == "fairness-sweep":
            manifest = run_fairness_sweep(cfg)
            print(json.dumps({k: manifest[k] for k in
                              ("experiment", "complete", "n_outcomes", "runtime_sec")}))
            return EXIT_OK
    except ExperimentFailure as exc:
        print(f"experiment aborted, partial results flushed: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
