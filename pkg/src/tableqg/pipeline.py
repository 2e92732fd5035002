"""Pipeline stages over a run directory.

Each stage reads its inputs from the run directory and writes its outputs
there, so any stage can be re-run without recomputing upstream stages::

    <run_dir>/corpus/      ingested tables.jsonl, queries.jsonl, manifest.json
    <run_dir>/dedup/       deduplicated corpus, manifest.json, remap.tsv
    <run_dir>/augmented/   <strategy>.jsonl (augmented tables + embedded text)
    <run_dir>/vectors/     <strategy>.jsonl (vector store)
    <run_dir>/index/       <strategy>.ivf (dense builds only)
    <run_dir>/reports/     <method>.json + <method>.txt
    <run_dir>/manifest.json  per-stage counts and timings
"""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

from .cache import GenerationCache
from .config import GeneratorConfig, PipelineConfig, method_strategy
from .corpus import (
    IngestReport,
    QueryRecord,
    deduplicate,
    ingest_corpus,
    load_queries,
    write_corpus,
)
from .embed import Embedder, make_embedder, read_vectors, write_vectors
from .evaluation import EvalReport, format_table, run_benchmark
from .index import IVFIndex, MultiIndex, SearchResult, build_ivf
from .providers import ChatCompletionProvider, HeuristicMockProvider, TextGenProvider
from .qgen import (
    AugmentedTable,
    RepresentationStrategy,
    RetryPolicy,
    augment_corpus,
    render_for_embedding,
)
from .tables import PartialTable, Table, TokenBudget, TopKRows, select_top_rows, truncate_by_tokens

logger = logging.getLogger(__name__)


class MissingArtifact(FileNotFoundError):
    """An upstream stage has not produced the file this stage needs."""


def make_provider(cfg: GeneratorConfig) -> TextGenProvider:
    if cfg.provider == "mock":
        return HeuristicMockProvider(cfg.model)
    return ChatCompletionProvider(cfg.model, cfg.base_url, cfg.api_key_env, cfg.temperature)


def _slug(name: str) -> str:
    return name.replace("+", "_plus_").replace("/", "_")


@dataclass
class Run:
    cfg: PipelineConfig

    @property
    def root(self) -> Path:
        return Path(self.cfg.run_dir)

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def dedup_dir(self) -> Path:
        return self.root / "dedup"

    @property
    def tables_dir(self) -> Path:
        return self.dedup_dir if self.cfg.corpus.dedup else self.corpus_dir

    @property
    def cache_dir(self) -> Path:
        return Path(self.cfg.cache_dir) if self.cfg.cache_dir else self.root / "cache"

    def augmented_path(self, s: RepresentationStrategy) -> Path:
        return self.root / "augmented" / f"{_slug(s.value)}.jsonl"

    def vectors_path(self, s: RepresentationStrategy) -> Path:
        return self.root / "vectors" / f"{_slug(s.value)}.jsonl"

    def index_path(self, s: RepresentationStrategy) -> Path:
        return self.root / "index" / f"{_slug(s.value)}.ivf"

    def report_path(self, method: str) -> Path:
        return self.root / "reports" / f"{_slug(method)}.json"

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"{path} not found; run the '{stage}' stage first")
        return path

    @contextmanager
    def stage(self, name: str):
        """Time a stage and record its counts in the run manifest."""
        info: dict = {}
        t0 = time.perf_counter()
        yield info
        info["seconds"] = round(time.perf_counter() - t0, 4)
        logger.info("stage=%s %s", name, " ".join(f"{k}={v}" for k, v in info.items()))
        self.root.mkdir(parents=True, exist_ok=True)
        mpath = self.root / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"stages": {}}
        manifest["stages"][name] = info
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def stage_ingest(run: Run) -> IngestReport:
    cfg = run.cfg
    with run.stage("ingest") as info:
        tables, report = ingest_corpus(cfg.corpus.tables, cfg.corpus.format, workers=cfg.workers)
        queries = load_queries(cfg.corpus.queries) if cfg.corpus.queries else []
        write_corpus(tables, queries, run.corpus_dir, skipped=report.skipped)
        info.update(tables=len(tables), queries=len(queries), skipped=report.skipped)
    return report


def stage_dedup(run: Run) -> dict:
    run.require(run.corpus_dir / "tables.jsonl", "ingest")
    with run.stage("dedup") as info:
        tables, _ = ingest_corpus(run.corpus_dir, "records")
        queries = _queries(run.corpus_dir)
        skipped = json.loads((run.corpus_dir / "manifest.json").read_text()).get("skipped", 0)
        new_tables, new_queries, remap = deduplicate(tables, queries)
        manifest = write_corpus(new_tables, new_queries, run.dedup_dir, remap, skipped=skipped)
        info.update(tables_in=len(tables), tables_out=len(new_tables), queries=len(new_queries))
    return manifest


def _queries(directory: Path) -> list[QueryRecord]:
    path = directory / "queries.jsonl"
    return load_queries(path) if path.exists() and path.stat().st_size else []


def load_tables(run: Run) -> list[Table]:
    run.require(run.tables_dir / "tables.jsonl", "dedup" if run.cfg.corpus.dedup else "ingest")
    return ingest_corpus(run.tables_dir, "records")[0]


def load_run_queries(run: Run) -> list[QueryRecord]:
    run.require(run.tables_dir / "queries.jsonl", "dedup" if run.cfg.corpus.dedup else "ingest")
    return _queries(run.tables_dir)


def select_partial(table: Table, cfg: PipelineConfig) -> PartialTable:
    sel = cfg.selection
    if sel.token_budget:
        return truncate_by_tokens(table, sel.token_budget, cfg.include_title.corpus)
    return select_top_rows(table, sel.top_k_rows)


def _partial_json(pt: PartialTable) -> dict:
    sel = {"top_k_rows": pt.strategy.k} if isinstance(pt.strategy, TopKRows) else {"token_budget": pt.strategy.n}
    return {"rows": [list(r) for r in pt.rows], "title": pt.title, "sheet": pt.sheet_name, "selection": sel}


def _partial_from_json(source_id: str, d: dict) -> PartialTable:
    sel = d["selection"]
    strategy = TopKRows(sel["top_k_rows"]) if "top_k_rows" in sel else TokenBudget(sel["token_budget"])
    return PartialTable(source_id, d["rows"], strategy, d.get("title"), d.get("sheet"))


def augmented_to_json(at: AugmentedTable, text: str) -> dict:
    return {
        "id": at.id,
        "strategy": at.strategy.value,
        "partial": _partial_json(at.partial),
        "questions": list(at.questions),
        "headers": list(at.headers) if at.headers is not None else None,
        "description": at.description,
        "under_provisioned": at.under_provisioned,
        "text": text,
    }


def augmented_from_json(d: dict) -> tuple[AugmentedTable, str]:
    at = AugmentedTable(
        partial=_partial_from_json(d["id"], d["partial"]),
        strategy=RepresentationStrategy(d["strategy"]),
        questions=tuple(d.get("questions") or ()),
        headers=tuple(d["headers"]) if d.get("headers") is not None else None,
        description=d.get("description"),
        under_provisioned=bool(d.get("under_provisioned")),
    )
    return at, d["text"]


def stage_augment(run: Run, strategy: RepresentationStrategy | None = None, provider: TextGenProvider | None = None) -> dict:
    cfg = run.cfg
    strategy = RepresentationStrategy(strategy or cfg.strategy)
    tables = load_tables(run)
    with run.stage(f"augment:{strategy.value}") as info:
        partials = [select_partial(t, cfg) for t in tables]
        if provider is None and strategy is not RepresentationStrategy.PT:
            provider = make_provider(cfg.generator)
        augmented, stats = augment_corpus(
            partials,
            strategy,
            provider,
            mode=cfg.generator.mode,
            policy=RetryPolicy(cfg.generator.max_attempts),
            include_title=cfg.include_title.generation,
            cache=GenerationCache(run.cache_dir),
            workers=cfg.workers,
        )
        path = run.augmented_path(strategy)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for at in augmented:
                text = render_for_embedding(at, cfg.include_title.corpus, cfg.generator.embed_headers)
                fh.write(json.dumps(augmented_to_json(at, text), ensure_ascii=False, separators=(",", ":")) + "\n")
        info.update(
            tables=stats.tables,
            provider_calls=stats.provider_calls,
            cache_hits=stats.cached,
            under_provisioned=len(stats.under_provisioned),
        )
    return info


def read_augmented(run: Run, strategy: RepresentationStrategy) -> list[tuple[AugmentedTable, str]]:
    path = run.require(run.augmented_path(strategy), "augment")
    with path.open(encoding="utf-8") as fh:
        return [augmented_from_json(json.loads(line)) for line in fh if line.strip()]


def stage_embed(run: Run, strategy: RepresentationStrategy | None = None, embedder: Embedder | None = None) -> dict:
    cfg = run.cfg
    strategy = RepresentationStrategy(strategy or cfg.strategy)
    items = read_augmented(run, strategy)
    embedder = embedder or make_embedder(cfg.embedder.spec(cfg.seed))
    with run.stage(f"embed:{strategy.value}") as info:
        vectors = embedder.embed_documents([text for _, text in items])
        n = write_vectors(run.vectors_path(strategy), zip((at.id for at, _ in items), vectors), strategy.value)
        info.update(vectors=n, dim=embedder.dim, truncated=embedder.truncated)
    return info


def stage_index(run: Run, strategy: RepresentationStrategy | None = None) -> dict:
    cfg = run.cfg
    strategy = RepresentationStrategy(strategy or cfg.strategy)
    path = run.require(run.vectors_path(strategy), "embed")
    with run.stage(f"index:{strategy.value}") as info:
        entries = [(tid, vec) for tid, _, vec in read_vectors(path)]
        if entries and entries[0][1].ndim == 2:
            info.update(kind="multi", entries=len(entries))
            return info
        index = build_ivf(entries, cfg.index.nlist, cfg.seed)
        out = run.index_path(strategy)
        out.parent.mkdir(parents=True, exist_ok=True)
        index.save(out)
        info.update(kind="ivf_flat", entries=len(index), nlist=index.nlist)
    return info


class Retriever:
    """Search over one strategy's embedded corpus build."""

    def __init__(self, run: Run, strategy: RepresentationStrategy, embedder: Embedder | None = None) -> None:
        cfg = run.cfg
        self.strategy = RepresentationStrategy(strategy)
        self.embedder = embedder or make_embedder(cfg.embedder.spec(cfg.seed))
        self.nprobe = cfg.index.nprobe
        self.multi: MultiIndex | None = None
        self.dense: IVFIndex | None = None
        if self.embedder.multi:
            path = run.require(run.vectors_path(self.strategy), "embed")
            self.multi = MultiIndex.build([(tid, vec) for tid, _, vec in read_vectors(path)])
        else:
            self.dense = IVFIndex.load(run.require(run.index_path(self.strategy), "index"))

    @property
    def kind(self) -> str:
        return self.embedder.spec.kind

    def search(self, text: str, k: int) -> SearchResult:
        q = self.embedder.embed_queries([text])[0]
        if self.multi is not None:
            return self.multi.search(q, k)
        return self.dense.search(q, k, self.nprobe)


def stage_search(run: Run, query: str, k: int, strategy: RepresentationStrategy | None = None) -> SearchResult:
    return Retriever(run, RepresentationStrategy(strategy or run.cfg.strategy)).search(query, k)


def stage_eval(run: Run, methods: list[str] | None = None, decomposer: TextGenProvider | None = None) -> list[EvalReport]:
    cfg = run.cfg
    queries = load_run_queries(run)
    if not queries:
        raise MissingArtifact("no queries in the corpus; set corpus.queries")
    reports = []
    retrievers: dict[RepresentationStrategy, Retriever] = {}
    with run.stage("eval") as info:
        for method in methods or cfg.eval.methods:
            s = method_strategy(method)
            if s not in retrievers:
                retrievers[s] = Retriever(run, s)
            r = retrievers[s]
            dec = decomposer
            if method.upper().startswith("MTR") and dec is None:
                dec = make_provider(cfg.decomposer or cfg.generator)
            report = run_benchmark(
                r.search,
                queries,
                cfg.eval.ks,
                method=method,
                decomposer=dec,
                policy=RetryPolicy(cfg.generator.max_attempts),
                metric=cfg.eval.metric,
                merge=cfg.eval.merge,
                retriever=r.kind,
                strategy=s.value,
            )
            report.write(run.report_path(method))
            reports.append(report)
            info[f"recall[{method}]"] = {str(k): round(v, 4) for k, v in report.recall.items()}
        summary = summary_table(reports)
        (run.root / "reports" / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    return reports


def summary_table(reports: list[EvalReport]) -> str:
    ks = reports[0].ks
    rows = [["method", "retriever", "strategy", "n"] + [f"R@{k}" for k in ks]]
    for r in reports:
        rows.append([r.method, r.retriever, r.strategy, str(r.n_queries)] + [f"{100 * r.recall[k]:.2f}" for k in ks])
    return format_table(rows)


def run_pipeline(run: Run, evaluate: bool = True, provider: TextGenProvider | None = None) -> list[EvalReport]:
    """Offline stages for every needed strategy, then (optionally) evaluation."""
    stage_ingest(run)
    if run.cfg.corpus.dedup:
        stage_dedup(run)
    for s in run.cfg.strategies():
        stage_augment(run, s, provider)
        stage_embed(run, s)
        stage_index(run, s)
    if evaluate and run.cfg.corpus.queries:
        return stage_eval(run)
    return []

