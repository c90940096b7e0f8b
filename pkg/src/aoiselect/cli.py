"""Command-line entry point: ``aoiselect run|validate|markov``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, validate_config
from .errors import AoiSelectError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

LOG_ENV = "AOISELECT_LOG"
_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

logger = logging.getLogger("aoiselect")


def _setup_logging():
    name = os.environ.get(LOG_ENV, "warn").strip().lower()
    level = _LEVELS.get(name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    if name not in _LEVELS:
        logger.warning("unknown %s=%r, using warn", LOG_ENV, name)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aoiselect", description="Age-based client selection experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config and write CSV/JSON artifacts")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--seed-override", type=int, default=None, dest="seed_override")

    val = sub.add_parser("validate", help="validate a config and print the resolved form")
    val.add_argument("--config", required=True)

    mk = sub.add_parser("markov", help="print the optimal (or monotone) chain as JSON")
    mk.add_argument("--n", type=int, required=True)
    mk.add_argument("--m", type=int, required=True)
    mk.add_argument("--mprime", type=int, required=True)
    mk.add_argument("--monotone", action="store_true")
    return parser


def _cmd_run(args) -> int:
    from .experiments import run_experiment

    cfg = validate_config(args.config)
    if args.threads < 1:
        raise ConfigError([("--threads", "must be >= 1")])
    run_experiment(cfg, args.out, threads=args.threads, seed_override=args.seed_override)
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .config import resolved

    cfg = validate_config(args.config)
    print(json.dumps(resolved(cfg), indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_markov(args) -> int:
    from .experiments import markov_report
    from .markov import calibrate_monotone_chain, optimal_markov_chain

    if args.monotone:
        chain = calibrate_monotone_chain(args.n, args.m, args.mprime)
        report = markov_report(chain, "monotone", n=args.n)
    else:
        res = optimal_markov_chain(args.n, args.m, args.mprime)
        report = markov_report(res.chain, res.regime, res.c, n=args.n)
        report["min_variance"] = res.min_variance
    print(json.dumps({"n": args.n, "m": args.m, **report}, indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    handler = {"run": _cmd_run, "validate": _cmd_validate, "markov": _cmd_markov}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AoiSelectError, ValueError) as exc:
        # bad numeric arguments to `markov` are a usage problem, not a crash
        code = EXIT_CONFIG if args.command == "markov" else EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
