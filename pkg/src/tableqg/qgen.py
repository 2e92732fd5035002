"""Synthetic question generation over partial tables and table augmentation."""

from __future__ import annotations

import enum
import json
import logging
import math
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

from . import prompts
from .cache import GenerationCache, cache_key
from .providers import TextGenProvider
from .tables import PartialTable, title_line, to_markdown

logger = logging.getLogger(__name__)

FULL_PIPELINE = "full_pipeline"
QUESTIONS_ONLY = "questions_only"
MODES = (FULL_PIPELINE, QUESTIONS_ONLY)


class RepresentationStrategy(str, enum.Enum):
    PT = "pT"
    HEADER_ONLY = "header-only"
    DESC_ONLY = "desc-only"
    QG_ONLY = "QG-only"
    PT_PLUS_HEADER = "pT+header"
    PT_PLUS_DESC = "pT+desc"
    QGPT = "QGpT"

    @property
    def needs_questions(self) -> bool:
        return self in (RepresentationStrategy.QG_ONLY, RepresentationStrategy.QGPT)

    @property
    def needs_headers(self) -> bool:
        return self in (RepresentationStrategy.HEADER_ONLY, RepresentationStrategy.PT_PLUS_HEADER)

    @property
    def needs_description(self) -> bool:
        return self in (RepresentationStrategy.DESC_ONLY, RepresentationStrategy.PT_PLUS_DESC)

    @property
    def shows_table(self) -> bool:
        return self in (
            RepresentationStrategy.PT,
            RepresentationStrategy.PT_PLUS_HEADER,
            RepresentationStrategy.PT_PLUS_DESC,
            RepresentationStrategy.QGPT,
        )


class ParseFailure(ValueError):
    def __init__(self, stage: str, message: str) -> None:
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class ExhaustedRetries(RuntimeError):
    def __init__(self, attempts: int, last_raw: str | None, last_error: Exception | None = None) -> None:
        self.attempts = attempts
        self.last_raw = last_raw
        self.last_error = last_error
        super().__init__(f"no valid reply after {attempts} attempts: {last_error}")


class StrategyMismatch(ValueError):
    pass


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff: float = 0.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class GenResult:
    headers: tuple[str, ...]
    questions: tuple[str, ...]
    raw: str
    model_id: str = ""
    attempts: int = 1
    # count rule still failing after every attempt; kept rather than dropped
    under_provisioned: bool = False
    cached: bool = False


@dataclass(frozen=True)
class AugmentedTable:
    partial: PartialTable
    strategy: RepresentationStrategy
    questions: tuple[str, ...] = ()
    headers: tuple[str, ...] | None = None
    description: str | None = None
    under_provisioned: bool = False

    @property
    def id(self) -> str:
        return self.partial.source_id


def build_prompt(pt: PartialTable, mode: str = FULL_PIPELINE, include_title: bool = False) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    template = prompts.FULL_PIPELINE if mode == FULL_PIPELINE else prompts.QUESTIONS_ONLY
    return prompts.fill_table(template, to_markdown(pt, include_title))


def build_description_prompt(pt: PartialTable, include_title: bool = False) -> str:
    return prompts.fill_table(prompts.DESCRIPTION, to_markdown(pt, include_title))


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*[ \t]*\n(.*?)```", re.DOTALL)


def _balanced_objects(text: str):
    """Yield every ``{...}`` substring with balanced braces, outside JSON strings."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_str = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_str:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    yield text[start : i + 1]
                    break
        start = text.find("{", start + 1)


def extract_json_object(raw: str) -> tuple[dict, str]:
    """Pull a JSON object out of a model reply.

    Tries the whole string, then the first fenced code block, then the first
    balanced-brace substring that parses. Returns ``(object, stage)``.
    """
    try:
        obj = json.loads(raw)
        if isinstance(obj, dict):
            return obj, "whole"
    except json.JSONDecodeError:
        pass
    m = _FENCE_RE.search(raw)
    if m:
        try:
            obj = json.loads(m.group(1))
            if isinstance(obj, dict):
                return obj, "fenced"
        except json.JSONDecodeError:
            pass
    for candidate in _balanced_objects(raw):
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj, "substring"
    raise ParseFailure("extract", "no JSON object found in reply")


def _string_list(obj: dict, key: str, stage: str) -> tuple[str, ...]:
    value = obj.get(key)
    if not isinstance(value, list):
        raise ParseFailure(stage, f"{key!r} must be a list, got {type(value).__name__}")
    if not all(isinstance(v, str) for v in value):
        raise ParseFailure(stage, f"{key!r} must contain only strings")
    cleaned = (v.strip() for v in value)
    return tuple(dict.fromkeys(v for v in cleaned if v))


def parse_json_strict(raw: str, mode: str = FULL_PIPELINE, model_id: str = "") -> GenResult:
    obj, stage = extract_json_object(raw)
    questions = _string_list(obj, "questions", stage)
    if not questions:
        raise ParseFailure(stage, "no questions in reply")
    headers: tuple[str, ...] = ()
    if mode == FULL_PIPELINE:
        headers = _string_list(obj, "headers", stage)
        if not headers:
            raise ParseFailure(stage, "no headers in reply")
    return GenResult(headers=headers, questions=questions, raw=raw, model_id=model_id)


def validate_count(headers_count: int, questions: Sequence[Any]) -> bool:
    """``len(questions) >= ceil(headers_count / 2)``.

    Non-emptiness of the question list is enforced by the parser, so with zero
    headers any parsed reply is accepted.
    """
    if headers_count < 0:
        raise ValueError("headers_count must be >= 0")
    return len(questions) >= math.ceil(headers_count / 2)


def _accepts(result: GenResult, mode: str) -> bool:
    if mode == QUESTIONS_ONLY:
        return len(result.questions) >= 1
    return validate_count(len(result.headers), result.questions)


def generate(
    pt: PartialTable,
    provider: TextGenProvider,
    mode: str = FULL_PIPELINE,
    policy: RetryPolicy | None = None,
    include_title: bool = False,
    cache: GenerationCache | None = None,
) -> GenResult:
    """Ask ``provider`` for headers and questions about ``pt``.

    Unparseable replies and replies that break the question-count rule are
    retried with the same prompt, up to ``policy.max_attempts`` calls. If the
    last parseable reply still breaks the count rule it is returned with
    ``under_provisioned=True``. A cached reply is served without calling the
    provider.
    """
    policy = policy or RetryPolicy()
    prompt = build_prompt(pt, mode, include_title)
    key = cache_key(provider.model_id, prompt)
    if cache is not None:
        raw = cache.get(key)
        if raw is not None:
            try:
                res = parse_json_strict(raw, mode, provider.model_id)
                return replace(res, attempts=0, cached=True, under_provisioned=not _accepts(res, mode))
            except ParseFailure:
                logger.warning("ignoring unparseable cache entry %s", key)

    fallback: GenResult | None = None
    last_raw: str | None = None
    last_err: Exception | None = None
    for attempt in range(1, policy.max_attempts + 1):
        if attempt > 1 and policy.backoff:
            time.sleep(policy.backoff * (attempt - 1))
        raw = provider.complete(prompt)
        last_raw = raw
        try:
            res = replace(parse_json_strict(raw, mode, provider.model_id), attempts=attempt)
        except ParseFailure as exc:
            last_err = exc
            logger.debug("table %s attempt %d: %s", pt.source_id, attempt, exc)
            continue
        if _accepts(res, mode):
            if cache is not None:
                cache.put(key, raw)
            return res
        fallback = res
        last_err = ValueError(f"{len(res.questions)} questions for {len(res.headers)} headers")

    if fallback is not None:
        logger.warning("table %s: count rule unmet after %d attempts; keeping thin result", pt.source_id, policy.max_attempts)
        if cache is not None:
            cache.put(key, fallback.raw)
        return replace(fallback, attempts=policy.max_attempts, under_provisioned=True)
    raise ExhaustedRetries(policy.max_attempts, last_raw, last_err)


def parse_description(raw: str) -> str:
    obj, stage = extract_json_object(raw)
    desc = obj.get("description")
    if not isinstance(desc, str):
        raise ParseFailure(stage, "'description' must be a string")
    if not desc.strip():
        raise ParseFailure(stage, "empty description")
    return desc.strip()


def generate_description(
    pt: PartialTable,
    provider: TextGenProvider,
    policy: RetryPolicy | None = None,
    include_title: bool = False,
    cache: GenerationCache | None = None,
) -> str:
    policy = policy or RetryPolicy()
    prompt = build_description_prompt(pt, include_title)
    key = cache_key(provider.model_id, prompt)
    if cache is not None:
        raw = cache.get(key)
        if raw is not None:
            try:
                return parse_description(raw)
            except ParseFailure:
                logger.warning("ignoring unparseable cache entry %s", key)
    last_raw = None
    last_err: Exception | None = None
    for attempt in range(1, policy.max_attempts + 1):
        if attempt > 1 and policy.backoff:
            time.sleep(policy.backoff * (attempt - 1))
        last_raw = provider.complete(prompt)
        try:
            desc = parse_description(last_raw)
        except ParseFailure as exc:
            last_err = exc
            continue
        if cache is not None:
            cache.put(key, last_raw)
        return desc
    raise ExhaustedRetries(policy.max_attempts, last_raw, last_err)


def augment(
    pt: PartialTable,
    gen: GenResult | str | None,
    strategy: RepresentationStrategy | str,
) -> AugmentedTable:
    strategy = RepresentationStrategy(strategy)
    if strategy is RepresentationStrategy.PT:
        return AugmentedTable(pt, strategy)
    if strategy.needs_description:
        if not isinstance(gen, str) or not gen.strip():
            raise StrategyMismatch(f"{strategy.value} needs a non-empty description")
        return AugmentedTable(pt, strategy, description=gen)
    if not isinstance(gen, GenResult):
        raise StrategyMismatch(f"{strategy.value} needs a generation result")
    if strategy.needs_headers and not gen.headers:
        raise StrategyMismatch(f"{strategy.value} needs extracted headers")
    if strategy.needs_questions and not gen.questions:
        raise StrategyMismatch(f"{strategy.value} needs questions")
    questions = tuple(dict.fromkeys(gen.questions)) if strategy.needs_questions else ()
    return AugmentedTable(
        pt,
        strategy,
        questions=questions,
        headers=gen.headers or None,
        under_provisioned=gen.under_provisioned,
    )


def render_for_embedding(at: AugmentedTable, include_title: bool = False, include_headers: bool = False) -> str:
    """Compose the text that gets embedded for one augmented table.

    Table-bearing strategies start with the markdown grid, followed by a blank
    line and the extra material. The others start with an optional title line.
    ``include_headers`` adds the extracted headers to QGpT output.
    """
    s = at.strategy
    headers = list(at.headers or ())
    if s.shows_table:
        parts = [to_markdown(at.partial, include_title)]
        if s is RepresentationStrategy.PT_PLUS_HEADER:
            parts.append("\n".join(headers))
        elif s is RepresentationStrategy.PT_PLUS_DESC:
            parts.append(at.description or "")
        elif s is RepresentationStrategy.QGPT:
            if include_headers and headers:
                parts.append("\n".join(headers))
            parts.append("\n".join(at.questions))
        return "\n\n".join(parts)

    lines = []
    head = title_line(at.partial.title, at.partial.sheet_name) if include_title else None
    if head:
        lines.append(head)
    if s is RepresentationStrategy.HEADER_ONLY:
        lines.extend(headers)
    elif s is RepresentationStrategy.DESC_ONLY:
        lines.append(at.description or "")
    else:
        lines.extend(at.questions)
    return "\n".join(lines)


@dataclass
class AugmentStats:
    tables: int = 0
    provider_calls: int = 0
    cached: int = 0
    under_provisioned: list[str] = field(default_factory=list)


def augment_corpus(
    partials: Sequence[PartialTable],
    strategy: RepresentationStrategy | str,
    provider: TextGenProvider | None,
    mode: str = FULL_PIPELINE,
    policy: RetryPolicy | None = None,
    include_title: bool = False,
    cache: GenerationCache | None = None,
    workers: int = 4,
) -> tuple[list[AugmentedTable], AugmentStats]:
    """Augment every partial table under one strategy, fanning out over a thread pool."""
    strategy = RepresentationStrategy(strategy)
    stats = AugmentStats(tables=len(partials))
    if strategy is RepresentationStrategy.PT:
        return [augment(pt, None, strategy) for pt in partials], stats
    if provider is None:
        raise StrategyMismatch(f"{strategy.value} needs a text-generation provider")
    if strategy.needs_headers and mode != FULL_PIPELINE:
        raise StrategyMismatch(f"{strategy.value} needs header extraction ({FULL_PIPELINE} mode)")

    counted = _CountingProvider(provider)
    hits_before = cache.hits if cache is not None else 0

    def one(pt: PartialTable):
        if strategy.needs_description:
            return generate_description(pt, counted, policy, include_title, cache)
        return generate(pt, counted, mode, policy, include_title, cache)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        gens = list(pool.map(one, partials))

    out = []
    for pt, gen in zip(partials, gens):
        if isinstance(gen, GenResult) and gen.under_provisioned:
            stats.under_provisioned.append(pt.source_id)
        out.append(augment(pt, gen, strategy))
    stats.provider_calls = counted.calls
    stats.cached = (cache.hits - hits_before) if cache is not None else 0
    return out, stats


class _CountingProvider:
    def __init__(self, inner: TextGenProvider) -> None:
        self.inner = inner
        self.model_id = inner.model_id
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str) -> str:
        with self._lock:
            self.calls += 1
        return self.inner.complete(prompt)
