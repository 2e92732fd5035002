"""Dense and multi-vector text embedders.

Vectors are numpy arrays: a dense vector has shape ``(dim,)`` and a
multi-vector has shape ``(n_tokens, dim)``. Every emitted vector is
L2-normalized, so inner product equals cosine similarity.

The mock embedders hash each token to a slot in ``[0, dim)``. The dense mock
sums a one-hot per token occurrence; the multi mock emits one one-hot per
token. Both are deterministic for a given seed and need no network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import httpx
import numpy as np

from .providers import ProviderError
from .tables import tokenize

logger = logging.getLogger(__name__)

KINDS = ("mock_dense", "mock_multi", "remote_dense", "remote_multi")
DEFAULT_DIM = 384
NORM_TOL = 1e-6


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str = "mock_dense"
    dim: int | None = DEFAULT_DIM
    seed: int | None = 0
    model: str = ""
    base_url: str | None = None
    api_key_env: str = "EMBEDDING_API_KEY"
    batch_size: int = 32
    max_tokens: int = 512
    query_prefix: str = ""
    doc_prefix: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown embedder kind {self.kind!r}")
        if self.kind.startswith("mock") and (self.seed is None or not self.dim):
            raise ValueError("mock embedders need a seed and a dim")

    @property
    def multi(self) -> bool:
        return self.kind.endswith("multi")


def normalize(matrix: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization. Raises on zero rows."""
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero vector")
    return m / norms


def mock_tokens(text: str) -> list[str]:
    """Lower-cased word tokens; punctuation-only text falls back to its symbols."""
    toks = [t.lower() for t in tokenize(text)]
    words = [t for t in toks if any(ch.isalnum() or ch == "_" for ch in t)]
    return words or toks


def token_slot(token: str, dim: int, seed: int = 0) -> int:
    digest = hashlib.blake2b(f"{seed}\x00{token}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


class Embedder:
    """Base class. Subclasses implement ``_embed(texts)``."""

    spec: EmbedderSpec

    def __init__(self, spec: EmbedderSpec) -> None:
        self.spec = spec
        self.truncated = 0

    @property
    def multi(self) -> bool:
        return self.spec.multi

    @property
    def dim(self) -> int | None:
        return self.spec.dim

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        for t in texts:
            if not t or not t.strip():
                raise ValueError("cannot embed empty text")
        out: list[np.ndarray] = []
        bs = max(1, self.spec.batch_size)
        for i in range(0, len(texts), bs):
            out.extend(self._embed(list(texts[i : i + bs])))
        return out

    def embed_documents(self, texts: Sequence[str]) -> list[np.ndarray]:
        return self.embed([self.spec.doc_prefix + t for t in texts])

    def embed_queries(self, texts: Sequence[str]) -> list[np.ndarray]:
        return self.embed([self.spec.query_prefix + t for t in texts])

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        raise NotImplementedError


class MockDenseEmbedder(Embedder):
    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        dim, seed = self.spec.dim, self.spec.seed
        out = []
        for text in texts:
            v = np.zeros(dim, dtype=np.float64)
            for tok in mock_tokens(text):
                v[token_slot(tok, dim, seed)] += 1.0
            out.append(normalize(v))
        return out


class MockMultiEmbedder(Embedder):
    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        dim, seed = self.spec.dim, self.spec.seed
        out = []
        for text in texts:
            toks = mock_tokens(text)
            if len(toks) > self.spec.max_tokens:
                self.truncated += 1
                toks = toks[: self.spec.max_tokens]
            m = np.zeros((len(toks), dim), dtype=np.float64)
            m[np.arange(len(toks)), [token_slot(t, dim, seed) for t in toks]] = 1.0
            out.append(m)
        return out


class RemoteEmbedder(Embedder):
    """Client for an HTTP embedding endpoint.

    Request ``{model, input: [texts]}`` to ``{base_url}/embeddings``; the
    response carries ``data[i].embedding``, a vector for dense kinds or a list
    of per-token vectors for multi kinds. One retry on transient failure.
    """

    def __init__(self, spec: EmbedderSpec, transport: httpx.BaseTransport | None = None, timeout: float = 60.0) -> None:
        super().__init__(spec)
        self.base_url = (spec.base_url or os.environ.get("EMBEDDING_BASE_URL") or "http://localhost:8080/v1").rstrip("/")
        key = os.environ.get(spec.api_key_env)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self._dim = spec.dim

    @property
    def dim(self) -> int | None:
        return self._dim

    def _request(self, texts: list[str]) -> list:
        url = f"{self.base_url}/embeddings"
        payload = {"model": self.spec.model, "input": texts}
        for attempt in (1, 2):
            try:
                resp = self._client.post(url, json=payload)
            except httpx.TransportError as exc:
                if attempt == 2:
                    raise ProviderError(f"transport error: {exc}") from exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                if attempt == 2:
                    raise ProviderError(f"HTTP {resp.status_code} from {url}")
                time.sleep(0.5)
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                data = resp.json()["data"]
                vectors = [d["embedding"] for d in sorted(data, key=lambda d: d.get("index", 0))]
            except (ValueError, KeyError, TypeError) as exc:
                raise ProviderError(f"malformed embedding response: {exc}") from exc
            if len(vectors) != len(texts):
                raise ProviderError(f"expected {len(texts)} embeddings, got {len(vectors)}")
            return vectors
        raise AssertionError("unreachable")

    def _check_dim(self, d: int) -> None:
        if self._dim is None:
            self._dim = d
        elif d != self._dim:
            raise DimensionMismatch(f"provider returned dim {d}, expected {self._dim}")

    def _embed(self, texts: list[str]) -> list[np.ndarray]:
        out = []
        for raw in self._request(texts):
            arr = np.asarray(raw, dtype=np.float64)
            if self.multi:
                if arr.ndim != 2 or arr.shape[0] == 0:
                    raise ProviderError("multi-vector response must be a non-empty list of vectors")
                if arr.shape[0] > self.spec.max_tokens:
                    self.truncated += 1
                    arr = arr[: self.spec.max_tokens]
            elif arr.ndim != 1:
                raise ProviderError("dense response must be a flat vector")
            self._check_dim(arr.shape[-1])
            out.append(normalize(arr))
        return out

    def close(self) -> None:
        self._client.close()


def make_embedder(spec: EmbedderSpec, transport: httpx.BaseTransport | None = None) -> Embedder:
    if spec.kind == "mock_dense":
        return MockDenseEmbedder(spec)
    if spec.kind == "mock_multi":
        return MockMultiEmbedder(spec)
    return RemoteEmbedder(spec, transport=transport)


def embed_dense(text: str, spec: EmbedderSpec) -> np.ndarray:
    if spec.multi:
        raise ValueError(f"{spec.kind} is a multi-vector embedder")
    return make_embedder(spec).embed([text])[0]


def embed_multi(text: str, spec: EmbedderSpec) -> np.ndarray:
    if not spec.multi:
        raise ValueError(f"{spec.kind} is a dense embedder")
    return make_embedder(spec).embed([text])[0]


# vector store: one JSON record per line, {table_id, strategy, dim, values}


def write_vectors(path: str | os.PathLike, records: Iterable[tuple[str, np.ndarray]], strategy: str) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    n = 0
    with tmp.open("w", encoding="utf-8", newline="\n") as fh:
        for table_id, vec in records:
            rec = {"table_id": table_id, "strategy": strategy, "dim": int(vec.shape[-1]), "values": vec.tolist()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
            n += 1
    os.replace(tmp, path)
    return n


def read_vectors(path: str | os.PathLike) -> Iterator[tuple[str, str, np.ndarray]]:
    """Yield ``(table_id, strategy, vector)``; checks that dims agree."""
    dim = None
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            vec = np.asarray(rec["values"], dtype=np.float64)
            if vec.shape[-1] != rec["dim"] or (dim is not None and rec["dim"] != dim):
                raise DimensionMismatch(f"vector for {rec['table_id']} has inconsistent dim")
            dim = rec["dim"]
            yield rec["table_id"], rec["strategy"], vec
