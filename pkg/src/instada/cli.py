"""Command-line entry point.

Exit codes: 0 success, 1 unfinished or failed items, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .annotations import DatasetError, load_dataset, validate_dataset
from .augment import EmptyPoolsError, PoolBuildError
from .backends.base import BackendError
from .orchestrator.checkpoint import RefusedResume
from .orchestrator.config import ConfigError, load_config
from .orchestrator.runner import COMMAND_STAGES, EXIT_CONFIG, EXIT_ITEMS, EXIT_OK, compute_stats, run
from .tagent import ElementExtractionFailed

log = logging.getLogger("instada")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="instada", description="Instance-level data augmentation pipeline.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    for name in (*COMMAND_STAGES, "validate", "stats"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--resume", type=Path, metavar="CKPT", help="continue from this checkpoint")
        sp.add_argument("--mock", action="store_true", help="use the in-process mock backends")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--allow-partial", action="store_true", help="exit 0 even if some items did not finish")

    sp = sub.add_parser("serve-mock", help="serve the mock world over the backend HTTP protocol")
    sp.add_argument("--dataset", type=Path, help="take the vocabulary from this dataset's categories")
    sp.add_argument("--vocab", default="", help="comma-separated category names")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)

    sp = sub.add_parser("make-toy", help="write a small synthetic dataset")
    sp.add_argument("out", type=Path)
    sp.add_argument("--images", type=int, default=5)
    sp.add_argument("--categories", default="apple,banana,cup")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _overrides(args) -> dict:
    out = {}
    if args.mock:
        out["mock"] = True
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _cmd_validate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    try:
        dataset = load_dataset(cfg.dataset)
    except (OSError, DatasetError) as exc:
        print(f"dataset: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    problems = cfg.missing_roles(tuple(COMMAND_STAGES["all"]))
    for r in problems:
        print(f"endpoints.{r}: no endpoint configured", file=sys.stderr)
    violations = validate_dataset(dataset)
    for v in violations:
        print(f"dataset: {v}", file=sys.stderr)
    if problems:
        return EXIT_CONFIG
    if violations:
        return EXIT_ITEMS
    n_img, n_ann, n_cat = dataset.counts()
    print(f"ok: {n_img} images, {n_ann} annotations, {n_cat} categories")
    return EXIT_OK


def _cmd_stats(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    print(json.dumps(compute_stats(cfg.output_path(), cfg.iagent.k), indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    report = run(cfg, args.command, resume=args.resume, allow_partial=args.allow_partial)
    for stage in report.skipped:
        print(f"{stage}: already complete")
    for stage, result in report.stages.items():
        print(f"{stage}: {len(result.results)}/{len(result.order)} items done")
    for msg in report.messages:
        print(msg, file=sys.stderr)
    return report.exit_code


def _cmd_serve_mock(args) -> int:
    import uvicorn

    from .backends.mock import MockBackends, MockWorld
    from .backends.service import create_app

    vocab = [v for v in args.vocab.split(",") if v]
    if args.dataset is not None:
        vocab = [c.name for c in sorted(load_dataset(args.dataset).categories, key=lambda c: c.id)]
    if not vocab:
        print("serve-mock needs --dataset or --vocab", file=sys.stderr)
        return EXIT_CONFIG
    uvicorn.run(create_app(MockBackends(MockWorld(tuple(vocab), seed=args.seed))), host=args.host, port=args.port)
    return EXIT_OK


def _cmd_make_toy(args) -> int:
    from .backends.mock import make_toy_dataset

    path = make_toy_dataset(args.out, n_images=args.images, categories=tuple(args.categories.split(",")), seed=args.seed)
    print(path)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"validate": _cmd_validate, "stats": _cmd_stats, "serve-mock": _cmd_serve_mock, "make-toy": _cmd_make_toy}
    try:
        return handlers.get(args.command, _cmd_run)(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except RefusedResume as exc:
        print(f"refusing to resume: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ElementExtractionFailed, BackendError, PoolBuildError, EmptyPoolsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ITEMS


if __name__ == "__main__":
    sys.exit(main())
