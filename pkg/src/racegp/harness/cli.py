"""Command-line entry point: ``racegp <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime or solver error,
4 missing artifact. ``RACEGP_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import ConfigError, resolve_config
from .io import ArtifactError
from . import pipeline

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ARTIFACT = 0, 2, 3, 4
COMMANDS = ("gen-track", "collect", "train", "validate", "race", "update", "report", "all")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="racegp", description="GP-corrected MPC racing pipeline")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default="scale143", help="TOML file or builtin name (scale143, f1tenth)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", default="runs/default", help="output directory")
    p.add_argument("--scenario", choices=sorted(pipeline.SCENARIOS), default="bayes")
    p.add_argument("--laps", type=int, help="override the number of laps")
    p.add_argument("--slack-override", type=float, help="boundary slack penalty for this race")
    p.add_argument("--model", choices=pipeline.MODEL_TAGS, default="initial",
                   help="corrected model used by race/validate")
    p.add_argument("--log", default=None, help="stage whose log validate/update read (e.g. race:best)")
    return p


def _dispatch(args, ws):
    cmd = args.command
    if cmd == "gen-track":
        return pipeline.cmd_generate_track(ws)
    if cmd == "collect":
        return pipeline.cmd_collect(ws, laps=args.laps)
    if cmd == "train":
        return pipeline.cmd_train(ws)
    if cmd == "race":
        return pipeline.cmd_race(ws, args.scenario, model_tag=args.model, laps=args.laps,
                                 slack_override=args.slack_override)
    if cmd == "validate":
        return pipeline.cmd_validate(ws, model_tag=args.model, log_stage=args.log or "race:best")
    if cmd == "update":
        return pipeline.cmd_update(ws, log_stage=args.log or "race:bayes")
    if cmd == "report":
        return str(pipeline.cmd_report(ws))
    return str(pipeline.run_all(ws))


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RACEGP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.laps is not None and args.laps < 1:
            raise ConfigError("--laps", "must be >= 1")
        if args.slack_override is not None and not args.slack_override > 0:
            raise ConfigError("--slack-override", "must be > 0")
        cfg = resolve_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        ws = pipeline.Workspace(args.out, cfg)
        result = _dispatch(args, ws)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if result is not None:
        print(result if isinstance(result, str) else json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
