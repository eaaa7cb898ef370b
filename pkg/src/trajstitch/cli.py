"""Command-line driver.

    trajstitch <command> --config run.yaml [--out DIR] [--seed N] [--quiet]

Commands: gen, train-models, stitch, bc, eval, report, pipeline. Each reads
the artifacts of earlier commands from the run directory. ``TS_THREADS``
caps the number of worker processes (default 1).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from .config import ConfigError, load_config
from .pipeline import COMMANDS, MissingArtifact, execute
from .report import MissingMetrics

log = logging.getLogger("trajstitch")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajstitch", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", help="run directory (overrides the config's out)")
    p.add_argument("--seed", type=int, help="base seed (overrides the config)")
    p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.command)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = args.out or cfg.out
    if not out:
        print("no run directory: pass --out or set 'out' in the config", file=sys.stderr)
        return 2
    try:
        execute(args.command, cfg, out)
    except (MissingArtifact, MissingMetrics) as exc:
        print(str(exc), file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
