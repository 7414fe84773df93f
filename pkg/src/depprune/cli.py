"""Command-line driver.

    depprune pipeline --out runs/demo
    depprune plan --out runs/demo --set prune.ratio=0.5

Errors print one JSON record to stderr and exit nonzero.
"""

import argparse
import json
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from .config import PipelineConfig
from .errors import ConfigError, DepPruneError
from .pipeline import STAGES, Run

COMMANDS = STAGES + ("pipeline",)
LOCK_NAME = ".depprune.lock"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="depprune", description="Dependency-aware structured pruning of a toy decoder.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", default="runs/default", help="output directory")
        p.add_argument("--seed", type=int, help="set every seed.* key")
        p.add_argument("--quiet", action="store_true")
    return parser


def load_config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides += [f"seed.{k}={args.seed}" for k in ("init", "data", "random", "lora")]
    return PipelineConfig.load(args.config, overrides)


def error_record(exc):
    rec = {"error": getattr(exc, "kind", type(exc).__name__), "message": str(exc)}
    if hasattr(exc, "producer"):
        rec["producer"] = exc.producer
        rec["artifact"] = exc.artifact
    if getattr(exc, "achievable", None) is not None:
        rec["achievable"] = exc.achievable
    return json.dumps(rec, sort_keys=True)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
        try:
            with FileLock(str(out / LOCK_NAME), timeout=0):
                run = Run(cfg, out, log)
                if args.command == "pipeline":
                    run.pipeline()
                else:
                    run.run(args.command)
        except Timeout:
            raise DepPruneError(f"another run holds the lock on {out}") from None
    except DepPruneError as exc:
        print(error_record(exc), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(error_record(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
