"""Command line entry point: ``regpool {train,compare,sweep,pairs,dump-maps}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from regpool import experiment as X
from regpool.config import load_config
from regpool.errors import ConfigError, DataError, ShapeError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", help="output directory (overrides 'output')")
    p.add_argument("--seeds", help="comma-separated seeds (overrides 'seeds')")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regpool", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one pooling configuration over all seeds")
    _common(p)

    p = sub.add_parser("compare", help="train several pooling kinds under identical seeds")
    _common(p)
    p.add_argument("kinds", nargs="*", help="pooling kinds (default: compare.kinds)")

    p = sub.add_parser("sweep", help="grid over pooling n, w and s")
    _common(p)
    p.add_argument("grid", nargs="*", help="grid dimensions such as n=3,5 w=3,5 s=2,3")

    p = sub.add_parser("pairs", help="per-epoch misrecognitions between class pairs")
    _common(p)
    p.add_argument("pairs", nargs="*", help="class pairs such as 7:9 2:7 (default: 'pairs' key)")

    p = sub.add_parser("dump-maps", help="write conv1 maps and their pooled versions as PGM")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="parameter checkpoint from 'train'")
    p.add_argument("--samples", help="comma-separated sample ids (default: dump.samples)")
    return parser


def run(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    overrides = list(args.overrides)
    if args.seeds is not None:
        overrides.append(f"seeds={args.seeds}")
    if args.command == "sweep":
        overrides += [f"{k}={v}" for k, v in X.parse_grid_spec(args.grid).items()]
    cfg = load_config(args.config, overrides)
    out = Path(args.out) if args.out else cfg.output

    if args.command == "train":
        X.cmd_train(cfg, out)
    elif args.command == "compare":
        X.cmd_compare(cfg, out, args.kinds)
    elif args.command == "sweep":
        X.cmd_sweep(cfg, out)
    elif args.command == "pairs":
        X.cmd_pairs(cfg, out, args.pairs)
    elif args.command == "dump-maps":
        samples = None
        if args.samples:
            try:
                samples = [int(v) for v in args.samples.split(",") if v.strip()]
            except ValueError:
                raise ConfigError("--samples: expected comma-separated integers") from None
        X.cmd_dump_maps(cfg, out, args.checkpoint, samples)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"regpool: config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ShapeError, ValueError, OSError) as exc:
        print(f"regpool: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
