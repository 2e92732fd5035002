"""Declarative pipeline configuration (YAML or JSON file)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .embed import EmbedderSpec
from .qgen import MODES, RepresentationStrategy


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorpusConfig(_Strict):
    tables: str
    format: Literal["csv-dir", "tsv-dir", "records"] = "records"
    queries: Optional[str] = None
    dedup: bool = True


class SelectionConfig(_Strict):
    top_k_rows: int = Field(10, ge=1)
    token_budget: Optional[int] = Field(None, ge=1)


class TitleConfig(_Strict):
    # corpus: title line in embedded text; generation: title line in the prompt
    corpus: bool = False
    generation: bool = False


class GeneratorConfig(_Strict):
    provider: Literal["mock", "openai"] = "mock"
    model: str = "mock-heuristic"
    base_url: Optional[str] = None
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.2
    mode: str = "full_pipeline"
    max_attempts: int = Field(3, ge=1)
    embed_headers: bool = False

    @field_validator("mode")
    @classmethod
    def _mode(cls, v: str) -> str:
        if v not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        return v


class EmbedderConfig(_Strict):
    kind: Literal["mock_dense", "mock_multi", "remote_dense", "remote_multi"] = "mock_dense"
    dim: Optional[int] = 384
    model: str = ""
    base_url: Optional[str] = None
    api_key_env: str = "EMBEDDING_API_KEY"
    batch_size: int = Field(32, ge=1)
    max_tokens: int = Field(512, ge=1)
    query_prefix: str = ""
    doc_prefix: str = ""

    def spec(self, seed: int) -> EmbedderSpec:
        return EmbedderSpec(seed=seed, **self.model_dump())


class IndexConfig(_Strict):
    nlist: int = Field(256, ge=1)
    nprobe: int = Field(16, ge=1)


class EvalConfig(_Strict):
    ks: list[int] = Field(default_factory=lambda: [1, 3, 5, 10])
    methods: list[str] = Field(default_factory=lambda: ["pT", "QGpT"])
    metric: Literal["partial", "all_gold"] = "partial"
    merge: Literal["max", "round_robin"] = "max"

    @field_validator("ks")
    @classmethod
    def _ks(cls, v: list[int]) -> list[int]:
        if not v or min(v) < 1:
            raise ValueError("ks must be a non-empty list of positive integers")
        return sorted(set(v))

    @field_validator("methods")
    @classmethod
    def _methods(cls, v: list[str]) -> list[str]:
        for m in v:
            method_strategy(m)
        return v


class PipelineConfig(_Strict):
    run_dir: str = "run"
    corpus: CorpusConfig
    strategy: RepresentationStrategy = RepresentationStrategy.QGPT
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    include_title: TitleConfig = Field(default_factory=TitleConfig)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    decomposer: Optional[GeneratorConfig] = None
    embedder: EmbedderConfig = Field(default_factory=EmbedderConfig)
    index: IndexConfig = Field(default_factory=IndexConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    seed: int = 0
    cache_dir: Optional[str] = None
    workers: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check(self) -> PipelineConfig:
        if self.embedder.kind.startswith("mock") and not self.embedder.dim:
            raise ValueError("mock embedders need embedder.dim")
        return self

    def strategies(self) -> list[RepresentationStrategy]:
        """Corpus builds needed: the configured strategy plus those behind each eval method."""
        out = [self.strategy]
        for m in self.eval.methods:
            s = method_strategy(m)
            if s not in out:
                out.append(s)
        return out


def method_strategy(method: str) -> RepresentationStrategy:
    """``MTR`` runs on the pT build, ``MTR+<strategy>`` on that strategy's build."""
    if method.upper() == "MTR":
        return RepresentationStrategy.PT
    if method.upper().startswith("MTR+"):
        return RepresentationStrategy(method[4:])
    return RepresentationStrategy(method)


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Read a config file and apply ``overrides`` (nested dict; flags win).

    Relative paths in the file resolve against the file's directory.
    """
    data: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        data = (json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a mapping")
        base = path.parent.resolve()
        corpus = data.get("corpus")
        if isinstance(corpus, dict):
            for key in ("tables", "queries"):
                if corpus.get(key):
                    corpus[key] = str((base / corpus[key]).resolve())
        for key in ("run_dir", "cache_dir"):
            if data.get(key):
                data[key] = str((base / data[key]).resolve())
    data = _deep_merge(data, overrides or {})
    return PipelineConfig.model_validate(data)
