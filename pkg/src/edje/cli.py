"""Command-line surface: synth | precompute | train | evaluate | bench.

Every subcommand reads one config file (``--config``), honors ``--seed``
as an override, and exits 0 on success, 2 on configuration errors, 3 on
data errors, 4 on numeric failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .bench import run_bench
from .config import Config, load_config
from .errors import ConfigError, DataError, EdjeError, NumericError
from .pipeline import (
    load_run_model,
    prepare_run_dir,
    run_evaluation,
    run_precompute,
    run_training,
)
from .synth import generate

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _load(args: argparse.Namespace) -> Config:
    config = load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    return config


def cmd_synth(args: argparse.Namespace) -> int:
    config = _load(args)
    prepare_run_dir(config, "synth")
    out_dir = Path(config.paths.data_dir)
    existing = [
        p
        for p in (
            out_dir / "raw_tokens.edjr",
            out_dir / "train_manifest.tsv",
            out_dir / "eval_manifest.tsv",
            out_dir / "image_embeddings.edjt",
            out_dir / "text_embeddings.edjt",
        )
        if p.exists()
    ]
    if existing and not args.force:
        raise DataError(
            f"refusing to overwrite {existing[0]} (and {len(existing) - 1} more); pass --force"
        )
    out = generate(out_dir, config.synth, config.seed)
    total = config.synth.images_train + config.synth.images_heldout
    print(f"wrote {total} images under {out_dir}")
    print(f"raw dump: {out.raw_dump}")
    print(f"manifests: {out.train_manifest}, {out.eval_manifest}")
    return 0


def cmd_precompute(args: argparse.Namespace) -> int:
    config = _load(args)
    prepare_run_dir(config, "precompute")
    store_path, summary = run_precompute(config)
    print(f"feature store: {store_path}")
    print(summary)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load(args)
    checkpoint = run_training(config, teacher_run_dir=args.distill)
    print(f"checkpoint: {checkpoint}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load(args)
    prepare_run_dir(config, "evaluate")
    if args.oracle_scorer:
        config.eval.oracle_scorer = True
    result = run_evaluation(config, split=args.split, pool_size=args.pool_size)
    for line in result.lines():
        print(line)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = _load(args)
    prepare_run_dir(config, "bench")
    model = load_run_model(config.paths.run_dir, config.model)
    report = run_bench(
        model,
        batch_size=config.bench.batch_size,
        iterations=config.bench.iterations,
        warmup=config.bench.warmup,
        raw_tokens=config.synth.raw_tokens,
        seed=config.seed,
    )
    for line in report.lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edje",
        description="Cached-vision joint-encoder reranking pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="path to a section.key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_synth = sub.add_parser("synth", help="generate a planted synthetic dataset")
    common(p_synth)
    p_synth.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p_synth.set_defaults(fn=cmd_synth)

    p_pre = sub.add_parser("precompute", help="run the adapter over the raw dump into a feature store")
    common(p_pre)
    p_pre.set_defaults(fn=cmd_precompute)

    p_train = sub.add_parser("train", help="train the adapter and joint encoder")
    common(p_train)
    p_train.add_argument("--distill", default=None, metavar="TEACHER_RUN_DIR",
                         help="distill from a finished teacher run directory")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("evaluate", help="two-stage retrieval evaluation with recall reporting")
    common(p_eval)
    p_eval.add_argument("--pool-size", type=int, default=None, help="rerank pool size override")
    p_eval.add_argument("--split", default=None, help="train | heldout | all")
    p_eval.add_argument("--oracle-scorer", action="store_true",
                        help="replace the model with a ground-truth oracle scorer")
    p_eval.set_defaults(fn=cmd_evaluate)

    p_bench = sub.add_parser("bench", help="reranking throughput microbenchmark")
    common(p_bench)
    p_bench.set_defaults(fn=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EdjeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
