"""Command-line interface.

Each subcommand runs one pipeline stage; ``run`` chains the full plan.
Exit status is 0 iff every requested stage succeeded.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .config import ConfigError, PipelineConfig, config_with_overrides, parse_config
from .pipeline import StageError, default_plan, run_pipeline


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", default=None,
                        help="pipeline config file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for scoring and feature extraction")
    parser.add_argument("--out", metavar="DIR", default=None, help="override paths.out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="synthsel",
        description="Score synthetic speech against real speech and select "
                    "subsets as supplementary ASR training data.")
    sub = parser.add_subparsers(dest="command", required=True)

    commands = {
        "toy-corpus": "generate the deterministic toy corpus, pool, and eval manifests",
        "featurize": "extract and cache log-mel and MFCC features",
        "ulm-train": "train the unit codebook and n-gram unit language model",
        "fuse": "intersect two selections",
        "analyze": "score-distribution report, figures, and unseen-word counts",
        "run": "run the full pipeline (or --stages subset)",
    }
    parsers = {}
    for name, help_text in commands.items():
        parsers[name] = sub.add_parser(name, help=help_text)
        _add_common(parsers[name])

    p = sub.add_parser("train-scorer", help="train the GRU scorer")
    p.add_argument("--head", choices=("bce", "arcface"), required=True)
    _add_common(p)

    p = sub.add_parser("score", help="score the synthetic pool with a trained model")
    p.add_argument("--method", choices=("cls", "cos"), required=True,
                   help="cls: classifier softmax score; cos: cosine to the average real embedding")
    _add_common(p)

    p = sub.add_parser("ulm-score", help="score the pool with the unit language model")
    p.add_argument("--metric", choices=("acc", "ppl"), required=True)
    _add_common(p)

    p = sub.add_parser("select", help="select a subset from a score file")
    p.add_argument("--scores", default="cls",
                   choices=("cls", "cos", "ulm_acc", "ulm_ppl", "confidence"),
                   help="which score file to select from")
    p.add_argument("--criterion", default=None,
                   help="range:LOW:HIGH | top:P | bottom:P | random:P[:SEED] "
                        "(default: the configured criterion)")
    _add_common(p)

    parsers["run"].add_argument("--stages", default=None,
                                help="comma-separated stage specs, e.g. "
                                     "'toy-corpus,featurize,train-scorer:bce'")
    return parser


def _stage_specs(args: argparse.Namespace, cfg: PipelineConfig) -> list[str]:
    cmd = args.command
    if cmd == "run":
        if args.stages:
            return [s.strip() for s in args.stages.split(",") if s.strip()]
        return default_plan(cfg)
    if cmd == "train-scorer":
        return [f"train-scorer:{args.head}"]
    if cmd == "score":
        return [f"score:{args.method}"]
    if cmd == "ulm-score":
        return [f"ulm-score:{args.metric}"]
    if cmd == "select":
        return [f"select:{args.scores}"]
    return [cmd]


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        cfg = config_with_overrides(cfg, seed=args.seed, threads=args.threads, out_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    specs = _stage_specs(args, cfg)
    try:
        if args.command == "select" and args.criterion is not None:
            from .pipeline import stage_select

            outcome = stage_select(cfg, args.scores, criterion_text=args.criterion)
            outcomes = [outcome]
        else:
            outcomes = run_pipeline(cfg, specs)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # surface unexpected failures with a stage-free prefix
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1

    for outcome in outcomes:
        status = "cached" if outcome.cached else "done"
        print(f"[{status}] {outcome.stage} ({len(outcome.outputs)} artifacts)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
