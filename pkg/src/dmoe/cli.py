"""Command-line entry point: ``dmoe <subcommand> [options]``.

Exit codes: 0 success, 1 validation error (bad arguments, config or missing
input files), 2 other I/O errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, apply_overrides, load_config
from .pipeline import Run

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2

SUBCOMMANDS = (
    "gen-corpus",
    "pretrain-base",
    "probe",
    "cluster",
    "extend",
    "train",
    "train-baseline",
    "adapt",
    "eval",
    "route-stats",
    "report",
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; usage errors are validation errors here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _csv_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--run-dir", help="overrides run_dir (default: $DMOE_RUN_DIR or ./run)")
    common.add_argument("--name", help="experiment name under the run directory")

    parser = _Parser(prog="dmoe", description="Dynamic mixture-of-experts pipeline on synthetic languages")
    sub = parser.add_subparsers(dest="command", metavar="|".join(SUBCOMMANDS), parser_class=_Parser)

    sub.add_parser("gen-corpus", parents=[common], help="generate the synthetic language corpus")
    sub.add_parser("pretrain-base", parents=[common], help="train the dense multilingual base model")

    p = sub.add_parser("probe", parents=[common], help="record parameter deviations per language")
    p.add_argument("--lang", action="append", help="language code (repeatable); default all training languages")
    p.add_argument("--steps", type=int)
    p.add_argument("--base", default="base")

    p = sub.add_parser("cluster", parents=[common], help="balanced clustering of a similarity matrix")
    p.add_argument("--matrix", type=Path)
    p.add_argument("--k", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--method", choices=["greedy", "exhaustive"])
    p.add_argument("--random", action="store_true", help="random balanced grouping instead")

    p = sub.add_parser("extend", parents=[common], help="extend selected dense layers to MoE")
    p.add_argument("--groups", type=Path)
    p.add_argument("--layers", type=_csv_ints, help="explicit comma-separated layer indices")
    p.add_argument("--random-layers", action="store_true")
    p.add_argument("--base", default="base")
    p.add_argument("--out", default="moe-init")

    p = sub.add_parser("train", parents=[common], help="two-stage DMoE training")
    p.add_argument("--moe", default="moe-init")
    p.add_argument("--groups", type=Path)
    p.add_argument("--out", default="dmoe")

    p = sub.add_parser("train-baseline", parents=[common], help="dense continued pre-training baseline")
    p.add_argument("--base", default="base")
    p.add_argument("--out", default="baseline")

    p = sub.add_parser("adapt", parents=[common], help="expert-copy adaptation to a new language (and LAPT)")
    p.add_argument("--lang")
    p.add_argument("--model", default="dmoe")
    p.add_argument("--no-lapt", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="held-out perplexity report")
    p.add_argument("--model", action="append", help="checkpoint name or path (repeatable); default dmoe")
    p.add_argument("--lang", action="append")

    p = sub.add_parser("route-stats", parents=[common], help="router top-1 frequencies per layer")
    p.add_argument("--model", default="dmoe")
    p.add_argument("--groups", type=Path)

    p = sub.add_parser("report", parents=[common], help="compare two evaluation reports")
    p.add_argument("--baseline", default="baseline")
    p.add_argument("--candidate", default="dmoe")
    return parser


def _config(args):
    cfg = load_config(args.config)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.name is not None:
        overrides.append(f"name={json.dumps(args.name)}")
    if args.run_dir is not None:
        overrides.append(f"run_dir={json.dumps(args.run_dir)}")
    return apply_overrides(cfg, overrides)


def _dispatch(args) -> None:
    run = Run(_config(args))
    cmd = args.command
    if cmd == "gen-corpus":
        print(run.gen_corpus())
    elif cmd == "pretrain-base":
        print(run.pretrain())
    elif cmd == "probe":
        for path in run.probe(args.lang, args.steps, args.base):
            print(path)
    elif cmd == "cluster":
        if args.random:
            print(run.random_groups(args.out))
        else:
            print(run.cluster(args.matrix, args.k, args.out, args.method))
    elif cmd == "extend":
        print(run.extend(args.groups, args.layers, args.random_layers, args.out, args.base))
    elif cmd == "train":
        print(run.train(args.moe, args.groups, args.out))
    elif cmd == "train-baseline":
        print(run.train_baseline(args.base, args.out))
    elif cmd == "adapt":
        print(run.adapt(args.lang, args.model, lapt=not args.no_lapt))
    elif cmd == "eval":
        for name in args.model or ["dmoe"]:
            json_path, _ = run.eval(name, args.lang)
            print(json_path)
    elif cmd == "route-stats":
        for path in run.route_stats(args.model, args.groups):
            print(path)
    elif cmd == "report":
        print(run.report(args.baseline, args.candidate))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv or argv[0] not in SUBCOMMANDS:
            if argv and argv[0] in ("-h", "--help"):
                parser.print_help()
                return EXIT_OK
            parser.print_usage(sys.stderr)
            print(f"dmoe: unknown or missing subcommand {argv[0] if argv else ''!r}", file=sys.stderr)
            return EXIT_VALIDATION
        args = parser.parse_args(argv)
        _dispatch(args)
    except SystemExit as exc:  # --help inside a subcommand
        return int(exc.code or 0)
    except FileNotFoundError as exc:
        print(f"dmoe: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"dmoe: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"dmoe: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
