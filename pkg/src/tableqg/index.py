"""Vector search: exact scan, IVF-Flat, and late-interaction MaxSim.

All rankings sort by score descending and break ties by ascending id.
Scores are inner products of L2-normalized vectors.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embed import DimensionMismatch

MAGIC = b"TQIV"
VERSION = 1
KMEANS_ITERS = 20
DEFAULT_NLIST = 256
DEFAULT_NPROBE = 16


class IndexFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SearchResult:
    hits: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [h[0] for h in self.hits]

    @property
    def scores(self) -> list[float]:
        return [h[1] for h in self.hits]

    def __len__(self) -> int:
        return len(self.hits)


def rank(ids: Sequence[str], scores: Sequence[float], k: int) -> SearchResult:
    """Top-``k`` of ``(id, score)`` pairs under (score desc, id asc)."""
    scores = np.asarray(scores, dtype=np.float64)
    n = len(ids)
    if k <= 0 or n == 0:
        return SearchResult(())
    if k < n:
        # keep everything tied with the k-th best so the id tie-break is exact
        kth = np.partition(-scores, k - 1)[k - 1]
        cand = np.nonzero(-scores <= kth)[0]
    else:
        cand = np.arange(n)
    order = sorted(cand.tolist(), key=lambda i: (-scores[i], ids[i]))[:k]
    return SearchResult(tuple((ids[i], float(scores[i])) for i in order))


def _scores(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    # row-wise reduction; the result for a row depends only on that row,
    # so a subset scan reproduces a full scan bit for bit
    return (matrix * query).sum(axis=1)


def _as_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if len(vectors) == 0:
        return np.zeros((0, 0))
    dims = {np.asarray(v).shape[-1] for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed vector dims {sorted(dims)}")
    return np.ascontiguousarray(np.stack([np.asarray(v, dtype=np.float64) for v in vectors]))


def brute_force_search(vectors: Sequence[tuple[str, np.ndarray]], query: np.ndarray, k: int) -> SearchResult:
    if not vectors:
        return SearchResult(())
    ids = [i for i, _ in vectors]
    matrix = _as_matrix([v for _, v in vectors])
    if matrix.shape[1] != query.shape[-1]:
        raise DimensionMismatch(f"query dim {query.shape[-1]} != index dim {matrix.shape[1]}")
    return rank(ids, _scores(matrix, query), k)


def _kmeans_pp(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centers = [int(rng.integers(n))]
    d2 = np.sum((data - data[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a chosen center
            nxt = int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((data - data[nxt]) ** 2, axis=1))
    return data[centers].copy()


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.where(norms > 0, m / np.where(norms > 0, norms, 1.0), m)


def spherical_kmeans(data: np.ndarray, k: int, seed: int, iters: int = KMEANS_ITERS) -> np.ndarray:
    """k-means++ seeding, then inner-product assignment and normalized mean updates."""
    rng = np.random.default_rng(seed)
    centroids = _normalize_rows(_kmeans_pp(data, k, rng))
    assign = None
    for _ in range(iters):
        new_assign = np.argmax(data @ centroids.T, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = data[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
        centroids = _normalize_rows(centroids)
    return centroids


@dataclass
class IVFIndex:
    """Inverted-file index with flat (exact) posting lists."""

    centroids: np.ndarray  # (nlist, dim)
    ids: list[str]
    vectors: np.ndarray  # (n, dim), rows in posting order
    offsets: np.ndarray  # (nlist + 1,), postings of list c are rows offsets[c]:offsets[c+1]

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def trained(self) -> bool:
        return self.nlist > 0

    def __len__(self) -> int:
        return len(self.ids)

    def postings(self, c: int) -> list[str]:
        return self.ids[self.offsets[c] : self.offsets[c + 1]]

    def search(self, query: np.ndarray, k: int, nprobe: int = DEFAULT_NPROBE) -> SearchResult:
        if query.shape[-1] != self.dim:
            raise DimensionMismatch(f"query dim {query.shape[-1]} != index dim {self.dim}")
        if nprobe < 1:
            raise ValueError("nprobe must be >= 1")
        nprobe = min(nprobe, self.nlist)
        coarse = _scores(self.centroids, query)
        probe = sorted(range(self.nlist), key=lambda c: (-coarse[c], c))[:nprobe]
        rows = np.concatenate([np.arange(self.offsets[c], self.offsets[c + 1]) for c in probe])
        if rows.size == 0:
            return SearchResult(())
        return rank([self.ids[r] for r in rows], _scores(self.vectors[rows], query), k)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<HIIQ", VERSION, self.dim, self.nlist, len(self.ids)))
        buf.write(self.centroids.astype("<f8").tobytes())
        buf.write(self.offsets.astype("<u8").tobytes())
        for tid in self.ids:
            raw = tid.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
        buf.write(self.vectors.astype("<f8").tobytes())
        body = buf.getvalue()
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> IVFIndex:
        if len(data) < 4 + 18 + 32 or data[:4] != MAGIC:
            raise IndexFormatError("not an IVF index file")
        body, digest = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise IndexFormatError("checksum mismatch")
        version, dim, nlist, n = struct.unpack_from("<HIIQ", body, 4)
        if version != VERSION:
            raise IndexFormatError(f"unsupported index version {version}")
        pos = 4 + struct.calcsize("<HIIQ")
        centroids = np.frombuffer(body, "<f8", nlist * dim, pos).reshape(nlist, dim).astype(np.float64)
        pos += 8 * nlist * dim
        offsets = np.frombuffer(body, "<u8", nlist + 1, pos).astype(np.int64)
        pos += 8 * (nlist + 1)
        ids = []
        for _ in range(n):
            (length,) = struct.unpack_from("<H", body, pos)
            pos += 2
            ids.append(body[pos : pos + length].decode("utf-8"))
            pos += length
        vectors = np.frombuffer(body, "<f8", n * dim, pos).reshape(n, dim).astype(np.float64)
        return cls(centroids, ids, vectors, offsets)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> IVFIndex:
        return cls.from_bytes(Path(path).read_bytes())


def build_ivf(vectors: Sequence[tuple[str, np.ndarray]], nlist: int = DEFAULT_NLIST, seed: int = 0) -> IVFIndex:
    """Train centroids with seeded k-means and file every vector under its nearest one.

    ``nlist`` is clamped to the number of vectors.
    """
    if not vectors:
        raise ValueError("cannot build an index from zero vectors")
    ids = [i for i, _ in vectors]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids in index input")
    data = _as_matrix([v for _, v in vectors])
    nlist = max(1, min(nlist, len(ids)))
    centroids = spherical_kmeans(data, nlist, seed)
    assign = np.argmax(data @ centroids.T, axis=1)
    # stable sort keeps input order within each posting list
    order = np.argsort(assign, kind="stable")
    counts = np.bincount(assign, minlength=nlist)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return IVFIndex(centroids, [ids[i] for i in order], np.ascontiguousarray(data[order]), offsets)


def search_dense(index: IVFIndex, query: np.ndarray, k: int, nprobe: int = DEFAULT_NPROBE) -> SearchResult:
    return index.search(query, k, nprobe)


def maxsim_score(query: np.ndarray, doc: np.ndarray) -> float:
    """Sum over query tokens of the best inner product with any doc token."""
    if query.shape[-1] != doc.shape[-1]:
        raise DimensionMismatch(f"query dim {query.shape[-1]} != doc dim {doc.shape[-1]}")
    return float((query @ doc.T).max(axis=1).sum())


@dataclass
class MultiIndex:
    ids: list[str]
    docs: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in multi-vector index")

    @classmethod
    def build(cls, entries: Sequence[tuple[str, np.ndarray]]) -> MultiIndex:
        return cls([i for i, _ in entries], [np.asarray(m, dtype=np.float64) for _, m in entries])

    def __len__(self) -> int:
        return len(self.ids)

    def search(self, query: np.ndarray, k: int, candidates: Sequence[str] | None = None) -> SearchResult:
        """Exhaustive MaxSim ranking; ``candidates`` restricts scoring to those ids (two-stage mode)."""
        if candidates is None:
            pool = range(len(self.ids))
        else:
            wanted = set(candidates)
            pool = [i for i, tid in enumerate(self.ids) if tid in wanted]
        pool = list(pool)
        scores = [maxsim_score(query, self.docs[i]) for i in pool]
        return rank([self.ids[i] for i in pool], scores, k)


def search_multi(index: MultiIndex, query: np.ndarray, k: int) -> SearchResult:
    return index.search(query, k)
