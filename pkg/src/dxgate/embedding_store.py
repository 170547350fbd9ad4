"""Token embedding models and Euclidean nearest-neighbor search.

An :class:`EmbeddingModel` is an immutable vocabulary plus a float32 matrix
with one row per token. Exact search is a blocked brute force: squared
distances are first estimated with a float64 GEMM per row chunk, candidates
within a rounding tolerance of each chunk's k-th value are kept, and the
final ranking is recomputed directly as ``||x - q||`` so that results are
exact and independent of the chunking/threading used.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "EmbeddingModel",
    "EmbeddingFormatError",
    "NeighborList",
    "load_glove_text",
    "save_binary",
    "load_binary",
    "exact_nearest",
    "exact_nearest_batch",
]

MAGIC = b"DXEMB\x00\x01\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQI")  # magic, version, count, dim
_U32 = struct.Struct("<I")

_PAIR_BLOCK = 1 << 16
DEFAULT_CHUNK_ROWS = 16384


class EmbeddingFormatError(ValueError):
    """Raised when an embedding file cannot be parsed."""


@dataclass(frozen=True, eq=False)
class EmbeddingModel:
    vocab: tuple[str, ...]
    matrix: np.ndarray
    name: str = "embedding"
    _index: dict = field(init=False, repr=False, compare=False)
    _sq_norms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[1] < 1:
            raise ValueError(f"matrix must be 2-d with at least one column, got shape {matrix.shape}")
        if len(self.vocab) != matrix.shape[0]:
            raise ValueError(f"vocab has {len(self.vocab)} entries but matrix has {matrix.shape[0]} rows")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("matrix contains non-finite values")
        vocab = tuple(self.vocab)
        index = {tok: i for i, tok in enumerate(vocab)}
        if len(index) != len(vocab):
            raise ValueError("vocab contains duplicate tokens")
        matrix.setflags(write=False)
        sq = np.einsum("ij,ij->i", matrix.astype(np.float64), matrix.astype(np.float64))
        sq.setflags(write=False)
        object.__setattr__(self, "vocab", vocab)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_sq_norms", sq)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def __contains__(self, token) -> bool:
        return token in self._index

    def lookup(self, token: str) -> int:
        """Row id of ``token``; raises ``KeyError`` for unknown tokens."""
        return self._index[token]

    def get_id(self, token: str, default=None):
        return self._index.get(token, default)

    def token(self, token_id: int) -> str:
        return self.vocab[token_id]

    def embed(self, token_id: int) -> np.ndarray:
        return self.matrix[token_id]

    def distance(self, a: int, b: int) -> float:
        diff = self.matrix[a].astype(np.float64) - self.matrix[b].astype(np.float64)
        return math.sqrt(float(diff @ diff))

    def nonzero_ids(self) -> np.ndarray:
        """Ids of rows whose embedding is not the zero vector."""
        return np.flatnonzero(self._sq_norms > 0.0)

    def identical_to(self, other: "EmbeddingModel") -> bool:
        return (
            self.name == other.name
            and self.vocab == other.vocab
            and self.matrix.shape == other.matrix.shape
            and self.matrix.tobytes() == other.matrix.tobytes()
        )


@dataclass(frozen=True)
class NeighborList:
    """Neighbors ascending by distance, ties broken by ascending token id."""

    ids: np.ndarray
    distances: np.ndarray
    query_kind: str = "exact"

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.distances)]

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, rank: int) -> tuple[int, float]:
        return int(self.ids[rank]), float(self.distances[rank])


# ---------------------------------------------------------------------------
# file formats


def load_glove_text(path, name: str | None = None, limit: int | None = None) -> EmbeddingModel:
    """Parse a GloVe-style text file (``word f1 f2 ...`` per line)."""
    vocab: list[str] = []
    rows: list[np.ndarray] = []
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            word, _, rest = line.partition(" ")
            values = np.array(rest.split(), dtype=np.float64) if rest else np.empty(0)
            if dim is None:
                if values.size == 0:
                    raise EmbeddingFormatError(f"line {lineno}: no vector values")
                dim = values.size
            elif values.size != dim:
                raise EmbeddingFormatError(
                    f"line {lineno}: expected {dim} values, found {values.size}"
                )
            if not np.all(np.isfinite(values)):
                raise EmbeddingFormatError(f"line {lineno}: non-finite value")
            vocab.append(word)
            rows.append(values.astype(np.float32))
            if limit is not None and len(vocab) >= limit:
                break
    if dim is None:
        raise EmbeddingFormatError(f"{path}: empty embedding file")
    if len(set(vocab)) != len(vocab):
        seen = set()
        for lineno, w in enumerate(vocab, start=1):
            if w in seen:
                raise EmbeddingFormatError(f"entry {lineno}: duplicate token {w!r}")
            seen.add(w)
    return EmbeddingModel(tuple(vocab), np.vstack(rows), name or os.path.basename(str(path)))


def save_binary(model: EmbeddingModel, path) -> None:
    """Write ``model`` in the little-endian binary format.

    Layout: magic, u32 version, u64 count, u32 dim, u32 name length + name,
    count*dim float32 row-major payload, then per token a u32 byte length and
    the UTF-8 bytes.
    """
    name = model.name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(model), model.dim))
        fh.write(_U32.pack(len(name)))
        fh.write(name)
        fh.write(model.matrix.astype("<f4", copy=False).tobytes(order="C"))
        for tok in model.vocab:
            raw = tok.encode("utf-8")
            fh.write(_U32.pack(len(raw)))
            fh.write(raw)


def load_binary(path) -> EmbeddingModel:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < 8 or head[:8] != MAGIC:
            raise EmbeddingFormatError(f"{path}: bad magic")
        if len(head) < _HEADER.size:
            raise EmbeddingFormatError(f"{path}: truncated header")
        _, version, count, dim = _HEADER.unpack(head)
        if version != FORMAT_VERSION:
            raise EmbeddingFormatError(f"{path}: unsupported version {version}")
        if dim == 0:
            raise EmbeddingFormatError(f"{path}: header dim is 0")
        raw = fh.read(4)
        if len(raw) < 4:
            raise EmbeddingFormatError(f"{path}: truncated header")
        (name_len,) = _U32.unpack(raw)
        name_raw = fh.read(name_len)
        if len(name_raw) < name_len:
            raise EmbeddingFormatError(f"{path}: truncated header")
        total = fh.seek(0, os.SEEK_END)
        offset = _HEADER.size + 4 + name_len
        payload = count * dim * 4
        # every vocab entry needs at least its 4-byte length prefix
        if offset + payload + 4 * count > total:
            raise EmbeddingFormatError(
                f"{path}: truncated payload (header says {count}x{dim}, file has {total} bytes)"
            )
        fh.seek(offset)
        matrix = np.fromfile(fh, dtype="<f4", count=count * dim)
        if matrix.size != count * dim:
            raise EmbeddingFormatError(f"{path}: truncated payload")
        vocab_block = fh.read()
    vocab = []
    pos = 0
    for i in range(count):
        if pos + 4 > len(vocab_block):
            raise EmbeddingFormatError(f"{path}: truncated vocab block at entry {i}")
        (n,) = _U32.unpack_from(vocab_block, pos)
        pos += 4
        if pos + n > len(vocab_block):
            raise EmbeddingFormatError(f"{path}: truncated vocab block at entry {i}")
        vocab.append(vocab_block[pos:pos + n].decode("utf-8"))
        pos += n
    if pos != len(vocab_block):
        raise EmbeddingFormatError(f"{path}: {len(vocab_block) - pos} trailing bytes after vocab block")
    try:
        return EmbeddingModel(tuple(vocab), matrix.reshape(count, dim).astype(np.float32), name_raw.decode("utf-8"))
    except ValueError as exc:
        raise EmbeddingFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# exact search


def _as_queries(model: EmbeddingModel, queries) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.ndim != 2 or q.shape[1] != model.dim:
        raise ValueError(f"query dimension mismatch: expected {model.dim}, got {q.shape[-1]}")
    if not np.all(np.isfinite(q)):
        raise ValueError("query contains non-finite values")
    return q


def _chunk_candidates(model, queries, q_sq, start, stop, k):
    """Row ids in ``[start, stop)`` that may belong to each query's top-k."""
    block = model.matrix[start:stop].astype(np.float64)
    r_sq = model._sq_norms[start:stop]
    d2 = queries @ block.T
    d2 *= -2.0
    d2 += q_sq[:, None]
    d2 += r_sq[None, :]
    kk = min(k, stop - start)
    kth = np.partition(d2, kk - 1, axis=1)[:, kk - 1]
    # bound on the expansion's rounding error, doubled for safety
    tol = 64.0 * (model.dim + 4) * np.finfo(np.float64).eps * (q_sq + r_sq.max())
    qi, ri = np.nonzero(d2 <= (kth + tol)[:, None])
    return qi, ri + start


def exact_nearest_batch(
    model: EmbeddingModel,
    queries,
    k: int,
    threads: int | None = None,
    chunk_rows: int = DEFAULT_CHUNK_ROWS,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest rows for each query.

    Returns ``(ids, distances)``, both shaped ``(n_queries, k)``.
    """
    q = _as_queries(model, queries)
    n_rows = len(model)
    if not 1 <= k <= n_rows:
        raise ValueError(f"k must be in [1, {n_rows}], got {k}")
    q_sq = np.einsum("ij,ij->i", q, q)
    bounds = [(s, min(s + chunk_rows, n_rows)) for s in range(0, n_rows, chunk_rows)]
    threads = threads or os.cpu_count() or 1

    def run(b):
        return _chunk_candidates(model, q, q_sq, b[0], b[1], k)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]

    qi = np.concatenate([p[0] for p in parts])
    ri = np.concatenate([p[1] for p in parts])
    dist = np.empty(len(qi))
    for s in range(0, len(qi), _PAIR_BLOCK):
        e = s + _PAIR_BLOCK
        diff = model.matrix[ri[s:e]].astype(np.float64) - q[qi[s:e]]
        dist[s:e] = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((ri, dist, qi))
    qi, ri, dist = qi[order], ri[order], dist[order]
    rank = np.arange(len(qi)) - np.searchsorted(qi, np.arange(len(q)))[qi]
    keep = rank < k

    out_ids = np.empty((len(q), k), dtype=np.int64)
    out_d = np.empty((len(q), k), dtype=np.float64)
    out_ids[qi[keep], rank[keep]] = ri[keep]
    out_d[qi[keep], rank[keep]] = dist[keep]
    return out_ids, out_d


def exact_nearest(model: EmbeddingModel, query, k: int = 1, threads: int | None = None,
                  chunk_rows: int = DEFAULT_CHUNK_ROWS) -> NeighborList:
    ids, dists = exact_nearest_batch(model, query, k, threads=threads, chunk_rows=chunk_rows)
    return NeighborList(ids[0], dists[0], "exact")


def neighbors_of_token(model: EmbeddingModel, token_id: int, k: int, threads: int | None = None) -> NeighborList:
    """Exact ranking around a stored token, with the token itself at rank 0.

    Duplicate rows would otherwise let a smaller id tie ahead of the token.
    """
    nl = exact_nearest(model, model.matrix[token_id], k, threads=threads)
    ids = nl.ids
    if ids[0] != token_id:
        pos = np.flatnonzero(ids == token_id)
        if pos.size:
            ids = np.concatenate(([token_id], np.delete(ids, pos[0])))
        else:
            ids = np.concatenate(([token_id], ids[:-1]))
        dists = np.concatenate(([0.0], np.delete(nl.distances, pos[0] if pos.size else -1)))
        return NeighborList(ids, dists, "exact")
    return nl


def recall_at_k(approx_ids: Sequence[Iterable[int]], exact_ids: Sequence[Iterable[int]]) -> float:
    """Mean fraction of true neighbors recovered by the approximate search."""
    total = 0.0
    for a, e in zip(approx_ids, exact_ids):
        e = set(int(x) for x in e)
        total += len(e.intersection(int(x) for x in a)) / len(e)
    return total / len(exact_ids)
