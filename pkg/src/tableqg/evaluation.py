"""Recall@k scoring, the query-decomposition (MTR) baseline, and benchmark runs."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import prompts
from .corpus import QueryRecord
from .index import SearchResult, rank
from .providers import TextGenProvider
from .qgen import ExhaustedRetries, ParseFailure, RetryPolicy, extract_json_object

logger = logging.getLogger(__name__)

PARTIAL = "partial"
ALL_GOLD = "all_gold"
DEFAULT_KS = (1, 3, 5, 10)
MMQA_KS = (2, 5, 10)


class MissingRun(KeyError):
    pass


@dataclass(frozen=True)
class QueryHits:
    qid: str
    gold_ids: tuple[str, ...]
    retrieved: tuple[str, ...]
    hits: dict[int, int]
    recall: dict[int, float]

    def to_json(self) -> dict:
        return {
            "qid": self.qid,
            "gold_ids": list(self.gold_ids),
            "retrieved": list(self.retrieved),
            "hits": {str(k): v for k, v in self.hits.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
        }


@dataclass
class EvalReport:
    ks: tuple[int, ...]
    recall: dict[int, float]
    per_query: list[QueryHits]
    metric: str = PARTIAL
    method: str = ""
    retriever: str = ""
    strategy: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def n_queries(self) -> int:
        return len(self.per_query)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "retriever": self.retriever,
            "strategy": self.strategy,
            "metric": self.metric,
            "ks": list(self.ks),
            "n_queries": self.n_queries,
            "recall": {str(k): self.recall[k] for k in self.ks},
            **self.extra,
            "per_query": [q.to_json() for q in self.per_query],
        }

    def summary(self) -> str:
        """Aligned plain-text table, one row per run."""
        header = ["method", "retriever", "strategy", "n"] + [f"R@{k}" for k in self.ks]
        row = [self.method, self.retriever, self.strategy, str(self.n_queries)]
        row += [f"{100 * self.recall[k]:.2f}" for k in self.ks]
        return format_table([header, row])

    def write(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        path.with_suffix(".txt").write_text(self.summary() + "\n", encoding="utf-8")


def format_table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _query_recall(gold: Sequence[str], retrieved: Sequence[str], k: int, metric: str) -> tuple[int, float]:
    top = set(retrieved[:k])
    hits = sum(1 for g in set(gold) if g in top)
    if metric == ALL_GOLD:
        return hits, float(hits == len(set(gold)))
    return hits, hits / len(set(gold))


def recall_at_k(
    runs: Mapping[str, SearchResult | Sequence[str]],
    queries: Sequence[QueryRecord],
    ks: Sequence[int] = DEFAULT_KS,
    metric: str = PARTIAL,
) -> EvalReport:
    """Macro-averaged Recall@k.

    Per query, recall@k is the fraction of gold tables found in the top ``k``
    (``metric="partial"``), or 1.0 only when all of them are
    (``metric="all_gold"``). Single-gold queries give the same value under
    both. Every query needs a run.
    """
    if metric not in (PARTIAL, ALL_GOLD):
        raise ValueError(f"unknown metric {metric!r}")
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError("ks must be positive")
    known = {q.qid for q in queries}
    extra = [qid for qid in runs if qid not in known]
    if extra:
        raise MissingRun(f"runs for unknown queries: {extra[:5]}")
    per_query = []
    for q in queries:
        if q.qid not in runs:
            raise MissingRun(f"no run for query {q.qid!r}")
        run = runs[q.qid]
        retrieved = tuple(run.ids if isinstance(run, SearchResult) else run)
        hits, recall = {}, {}
        for k in ks:
            hits[k], recall[k] = _query_recall(q.gold_ids, retrieved, k, metric)
        per_query.append(QueryHits(q.qid, q.gold_ids, retrieved[: ks[-1]], hits, recall))
    n = len(per_query)
    agg = {k: (sum(p.recall[k] for p in per_query) / n if n else 0.0) for k in ks}
    return EvalReport(ks=ks, recall=agg, per_query=per_query, metric=metric)


@dataclass(frozen=True)
class SubQuerySet:
    qid: str
    question: str
    sub_queries: tuple[str, ...]
    fallback: bool = False


def build_decompose_prompt(question: str) -> str:
    return prompts.fill_question(prompts.DECOMPOSE, question)


def parse_sub_queries(raw: str) -> tuple[str, ...]:
    obj, stage = extract_json_object(raw)
    subs = obj.get("sub_queries")
    if not isinstance(subs, list) or not all(isinstance(s, str) for s in subs):
        raise ParseFailure(stage, "'sub_queries' must be a list of strings")
    cleaned = tuple(dict.fromkeys(s.strip() for s in subs if s.strip()))
    if not cleaned:
        raise ParseFailure(stage, "no sub-queries")
    return cleaned


def mtr_decompose(
    question: str,
    provider: TextGenProvider,
    policy: RetryPolicy | None = None,
    qid: str = "",
) -> SubQuerySet:
    """Split a multi-table question into single-table sub-queries.

    After ``policy.max_attempts`` unusable replies the original question is
    used alone and the result is flagged ``fallback``.
    """
    policy = policy or RetryPolicy()
    prompt = build_decompose_prompt(question)
    last_err = None
    for attempt in range(1, policy.max_attempts + 1):
        if attempt > 1 and policy.backoff:
            time.sleep(policy.backoff * (attempt - 1))
        raw = provider.complete(prompt)
        try:
            return SubQuerySet(qid, question, parse_sub_queries(raw))
        except ParseFailure as exc:
            last_err = exc
    logger.warning("decomposition failed for %r (%s); using the question as-is", qid or question, last_err)
    return SubQuerySet(qid, question, (question,), fallback=True)


def mtr_merge(results: Sequence[SearchResult], k: int, strategy: str = "max") -> SearchResult:
    """Merge per-sub-query rankings.

    ``max`` keeps each id's best score across lists; ``round_robin``
    interleaves the lists rank by rank, skipping ids already taken, and
    reports each id's best score.
    """
    if not results:
        raise ValueError("need at least one result list")
    best: dict[str, float] = {}
    for res in results:
        for tid, score in res.hits:
            if tid not in best or score > best[tid]:
                best[tid] = score
    if strategy == "max":
        ids = sorted(best)
        return rank(ids, [best[i] for i in ids], k)
    if strategy == "round_robin":
        out: list[tuple[str, float]] = []
        seen: set[str] = set()
        depth = max(len(r) for r in results)
        for pos in range(depth):
            for res in results:
                if pos < len(res.hits) and res.hits[pos][0] not in seen:
                    tid = res.hits[pos][0]
                    seen.add(tid)
                    out.append((tid, best[tid]))
        return SearchResult(tuple(out[:k]))
    raise ValueError(f"unknown merge strategy {strategy!r}")


SearchFn = Callable[[str, int], SearchResult]


def run_benchmark(
    search: SearchFn,
    queries: Sequence[QueryRecord],
    ks: Sequence[int] = DEFAULT_KS,
    method: str = "pT",
    decomposer: TextGenProvider | None = None,
    policy: RetryPolicy | None = None,
    metric: str = PARTIAL,
    merge: str = "max",
    retriever: str = "",
    strategy: str = "",
) -> EvalReport:
    """Retrieve for every query and score with :func:`recall_at_k`.

    ``search(text, k)`` queries one embedded and indexed corpus build. Methods
    whose name starts with ``MTR`` decompose each question with
    ``decomposer``, retrieve ``max(ks)`` candidates per sub-query and merge.
    """
    depth = max(ks)
    use_mtr = method.upper().startswith("MTR")
    if use_mtr and decomposer is None:
        raise ValueError(f"method {method!r} needs a decomposition provider")
    runs: dict[str, SearchResult] = {}
    fallbacks = 0
    for q in queries:
        if use_mtr:
            subs = mtr_decompose(q.question, decomposer, policy, q.qid)
            fallbacks += int(subs.fallback)
            runs[q.qid] = mtr_merge([search(s, depth) for s in subs.sub_queries], depth, merge)
        else:
            runs[q.qid] = search(q.question, depth)
    report = recall_at_k(runs, queries, ks, metric)
    report.method, report.retriever, report.strategy = method, retriever, strategy
    if use_mtr:
        report.extra["decomposition_fallbacks"] = fallbacks
    return report
