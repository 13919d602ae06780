"""Command-line entry point."""

from __future__ import annotations

import argparse
import os
import sys

from .campaign import CampaignFailure, run
from .config import KINDS, ConfigError, default_config, load_config, validate_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "DELONELAB_THREADS"


def _parser():
    p = argparse.ArgumentParser(prog="delonelab", description="Delone-Anderson numerical experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*KINDS, "validate-config"):
        s = sub.add_parser(name)
        s.add_argument("--config", metavar="PATH", required=name == "validate-config")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int)
        s.add_argument("--out", metavar="DIR", default="results")
        s.add_argument("--force", action="store_true", help="ignore cached results")
    return p


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError([f"{THREADS_ENV}: not an integer ({env!r})"]) from None
    return 1


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else default_config(args.command)
        if args.command != "validate-config" and cfg.kind != args.command:
            raise ConfigError([f"kind: config is a {cfg.kind!r} experiment, command is {args.command!r}"])
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        threads = _threads(args.threads)
        if threads < 1:
            raise ConfigError(["--threads: must be >= 1"])
    except ConfigError as err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate-config":
        print(f"ok {cfg.kind} {cfg.hash()}")
        return EXIT_OK
    try:
        res = run(cfg, args.out, threads=threads, force=args.force)
    except CampaignFailure as err:
        print(err, file=sys.stderr)
        return EXIT_NUMERIC
    state = "cached" if res.cached else f"{res.timing.get('seconds', 0):.2f}s"
    print(f"{res.kind} {res.config_hash[:16]} {state} -> {res.directory}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
