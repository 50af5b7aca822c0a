"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (failed gradient check, aborted
training, malformed checkpoint), 2 usage error (bad flags, missing or
unparsable input files).
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import gradsuite, harness
from .config import ABLATIONS, ConfigError, load_config
from .serialize import FormatError

EXIT_OK, EXIT_INVALID, EXIT_USAGE = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossalign", description="Cross-modal alignment toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--ablate", action="append", choices=ABLATIONS, default=[],
                   help="disable a component (repeatable)")
    t.add_argument("--out", help="output directory (overrides out_dir in the config)")
    t.add_argument("--quiet", action="store_true", help="do not echo per-epoch log lines")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--module", choices=list(gradsuite.CHECKS))
    g.add_argument("--configs", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("gap-report", help="modality-gap metrics of a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--split", choices=("train", "val"), default="val")
    r.add_argument("--out", required=True)

    d = sub.add_parser("dump-embeddings", help="write pooled embeddings as a CMAB block")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--split", choices=("train", "val"), default="val")
    d.add_argument("--out", required=True)

    c = sub.add_parser("decode", help="greedy caption for a synthetic sample")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--seed", type=int, required=True)
    return p


def _train(args) -> int:
    cfg = load_config(args.config)
    if args.ablate:
        cfg = cfg.with_ablation(*args.ablate)
    if not args.quiet:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stdout)
    res = harness.train(cfg, out_dir=args.out)
    final = res.final.as_dict()
    print(f"checkpoint={res.checkpoint}")
    for key in ("l2_mean", "cos_mean", "val_acc"):
        print(f"{key}={final[key]!r}")
    return EXIT_OK


def _gradcheck(args) -> int:
    if args.configs < 1:
        raise ConfigError("--configs must be positive")
    modules = [args.module] if args.module else None
    results = gradsuite.run_suite(modules, configs=args.configs, seed=args.seed)
    sys.stdout.write(gradsuite.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


def _gap_report(args) -> int:
    metrics = harness.gap_report(args.checkpoint, args.split, args.out)
    sys.stdout.write(metrics.as_lines())
    return EXIT_OK


def _dump(args) -> int:
    block = harness.dump_embeddings(args.checkpoint, args.split, args.out)
    print(f"rows={block.shape[0]} dim={block.shape[1]}")
    return EXIT_OK


def _decode(args) -> int:
    print(" ".join(harness.decode_seed(args.checkpoint, args.seed)))
    return EXIT_OK


COMMANDS = {"train": _train, "gradcheck": _gradcheck, "gap-report": _gap_report,
            "dump-embeddings": _dump, "decode": _decode}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:   # argparse already printed its message
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ConfigError, IsADirectoryError, PermissionError) as exc:
        print(f"crossalign {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (harness.TrainingAborted, FormatError, KeyError, ValueError) as exc:
        print(f"crossalign {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
