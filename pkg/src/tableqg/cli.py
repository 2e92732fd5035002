"""Command-line entry point: ``tableqg <command> [--config FILE] [flags]``.

Every command reads a pipeline config (``--config``, or ``--toy`` for the
bundled toy corpus with mock providers); flags override config values.
Failures exit non-zero with one line on stderr::

    error category=<category> message="<human-readable message>"
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from pydantic import ValidationError

from .config import PipelineConfig, load_config
from .corpus import DanglingGold, DuplicateId, ParseError
from .embed import DimensionMismatch
from .evaluation import MissingRun
from .index import IndexFormatError
from .pipeline import (
    MissingArtifact,
    Run,
    run_pipeline,
    stage_augment,
    stage_dedup,
    stage_embed,
    stage_eval,
    stage_index,
    stage_ingest,
    stage_search,
    summary_table,
)
from .providers import ProviderError
from .qgen import ExhaustedRetries, StrategyMismatch
from .tables import BudgetTooSmall

logger = logging.getLogger("tableqg")

# first match wins, so subclasses precede their bases
ERROR_CATEGORIES: list[tuple[type[BaseException], str]] = [
    (ValidationError, "config"),
    (ParseError, "parse"),
    (DuplicateId, "duplicate_id"),
    (DanglingGold, "dangling_gold"),
    (ProviderError, "provider"),
    (ExhaustedRetries, "exhausted_retries"),
    (BudgetTooSmall, "budget_too_small"),
    (DimensionMismatch, "dimension_mismatch"),
    (IndexFormatError, "index_format"),
    (StrategyMismatch, "strategy_mismatch"),
    (MissingRun, "missing_run"),
    (MissingArtifact, "missing_artifact"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
    (ValueError, "invalid_value"),
]


def toy_config_path() -> Path:
    return Path(str(resources.files("tableqg") / "data" / "toy" / "config.yaml"))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="pipeline config (YAML or JSON)")
    p.add_argument("--toy", action="store_true", help="use the bundled toy corpus and mock providers")
    p.add_argument("--run-dir", help="artifact directory for this run")
    p.add_argument("--cache-dir", help="generation cache directory")
    p.add_argument("--strategy", help="table representation strategy (pT, QGpT, QG-only, ...)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, help="concurrency limit")
    p.add_argument("--nlist", type=int)
    p.add_argument("--nprobe", type=int)
    p.add_argument("--top-k-rows", type=int)
    p.add_argument("--token-budget", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tableqg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("ingest", "load the table corpus and query set"),
        ("dedup", "schema-based deduplication of the ingested corpus"),
        ("augment", "build augmented tables for the strategy"),
        ("embed", "embed augmented tables"),
        ("index", "build the vector index"),
    ]:
        _add_common(sub.add_parser(name, help=help_))

    p = sub.add_parser("search", help="query one corpus build")
    _add_common(p)
    p.add_argument("--query", "-q", required=True)
    p.add_argument("-k", type=int, default=10)

    p = sub.add_parser("eval", help="score retrieval with Recall@k")
    _add_common(p)
    p.add_argument("--methods", nargs="+", help="e.g. pT QGpT MTR MTR+QGpT")
    p.add_argument("--ks", type=int, nargs="+")
    p.add_argument("--metric", choices=["partial", "all_gold"])

    p = sub.add_parser("pipeline", help="run all offline stages, then evaluation")
    _add_common(p)
    p.add_argument("--methods", nargs="+")
    p.add_argument("--ks", type=int, nargs="+")
    p.add_argument("--metric", choices=["partial", "all_gold"])
    p.add_argument("--no-eval", action="store_true")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    o: dict = {}
    for flag, key in [("run_dir", "run_dir"), ("cache_dir", "cache_dir"), ("strategy", "strategy"), ("seed", "seed"), ("workers", "workers")]:
        if getattr(args, flag, None) is not None:
            o[key] = getattr(args, flag)
    for flag, section, key in [
        ("nlist", "index", "nlist"),
        ("nprobe", "index", "nprobe"),
        ("top_k_rows", "selection", "top_k_rows"),
        ("token_budget", "selection", "token_budget"),
        ("methods", "eval", "methods"),
        ("ks", "eval", "ks"),
        ("metric", "eval", "metric"),
    ]:
        if getattr(args, flag, None) is not None:
            o.setdefault(section, {})[key] = getattr(args, flag)
    return o


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    if args.config is None and not args.toy:
        raise ValueError("pass --config FILE or --toy")
    path = toy_config_path() if args.toy and args.config is None else args.config
    overrides = _overrides(args)
    if args.toy and "run_dir" not in overrides:
        overrides["run_dir"] = "toy-run"
    return load_config(path, overrides)


def _dispatch(args: argparse.Namespace) -> None:
    run = Run(resolve_config(args))
    cmd = args.command
    if cmd == "ingest":
        stage_ingest(run)
    elif cmd == "dedup":
        stage_dedup(run)
    elif cmd == "augment":
        stage_augment(run)
    elif cmd == "embed":
        stage_embed(run)
    elif cmd == "index":
        stage_index(run)
    elif cmd == "search":
        result = stage_search(run, args.query, args.k)
        for rank, (tid, score) in enumerate(result.hits, start=1):
            print(f"{rank} {tid} {score:.6f}")
    elif cmd == "eval":
        print(summary_table(stage_eval(run)))
    elif cmd == "pipeline":
        reports = run_pipeline(run, evaluate=not args.no_eval)
        if reports:
            print(summary_table(reports))


def _category(exc: BaseException) -> str | None:
    for cls, name in ERROR_CATEGORIES:
        if isinstance(exc, cls):
            return name
    return None


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        _dispatch(args)
    except Exception as exc:  # noqa: BLE001
        category = _category(exc)
        if category is None:
            raise
        message = str(exc).replace("\n", " ")
        print(f"error category={category} message={json.dumps(message)}", file=sys.stderr)
        return 2 if category == "config" else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
