"""Text-similarity features for utility prediction.

Texts are embedded by a pluggable provider (HTTP service, digest lookup file,
or an offline deterministic mock) and compared with cosine similarity.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import httpx
import numpy as np

__all__ = [
    "ProviderError",
    "FeatureVector",
    "cosine_similarity",
    "text_digest",
    "MockEmbeddingProvider",
    "HttpEmbeddingProvider",
    "FileEmbeddingProvider",
    "MemoizedProvider",
    "make_provider",
    "compute_features",
    "compute_features_batch",
    "realized_target",
    "token_change_stats",
]

FEATURE_COLUMNS = ("epsilon", "sim_b", "sim_c", "sim_d")


class ProviderError(RuntimeError):
    """Embedding backend failure; ``text`` is the first text that failed."""

    retryable = True

    def __init__(self, message: str, text: str | None = None):
        super().__init__(message)
        self.text = text


def text_digest(text: str) -> str:
    return hashlib.sha256(unicodedata.normalize("NFC", text).encode("utf-8")).hexdigest()


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(min(1.0, max(-1.0, (u @ v) / (nu * nv))))


@dataclass
class FeatureVector:
    epsilon: float
    sim_b: float
    sim_c: float
    sim_d: float
    target_e: float | None = None
    target_kind: str | None = None  # "realized" | "predicted"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        for name in ("sim_b", "sim_c", "sim_d", "target_e"):
            val = getattr(self, name)
            if val is not None and not -1.0 <= val <= 1.0:
                raise ValueError(f"{name}={val} outside [-1, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# providers


class MockEmbeddingProvider:
    """Deterministic offline embeddings.

    Plain mode hashes the whole normalized text to a random unit vector.
    Semantic mode sums per-word hash vectors, so texts sharing words get
    proportionally similar embeddings.
    """

    _word_re = re.compile(r"\w+", re.UNICODE)

    def __init__(self, dim: int = 384, seed: int = 0, semantic: bool = True):
        self.dim = dim
        self.seed = seed
        self.semantic = semantic
        self._word_cache: dict[str, np.ndarray] = {}

    def _hash_vector(self, key: str) -> np.ndarray:
        vec = self._word_cache.get(key)
        if vec is None:
            h = hashlib.sha256(f"{self.seed}\x00{key}".encode("utf-8")).digest()
            rng = np.random.default_rng(np.frombuffer(h[:16], dtype=np.uint64))
            vec = rng.standard_normal(self.dim)
            self._word_cache[key] = vec
        return vec

    def embed_one(self, text: str) -> np.ndarray:
        text = unicodedata.normalize("NFC", text)
        if not self.semantic:
            v = self._hash_vector(text)
        else:
            words = self._word_re.findall(text.lower())
            if not words:
                v = self._hash_vector("")
            else:
                v = np.sum([self._hash_vector(w) for w in words], axis=0)
        return v / np.linalg.norm(v)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.vstack([self.embed_one(t) for t in texts]) if texts else np.empty((0, self.dim))


class HttpEmbeddingProvider:
    """POST ``{"model", "input": [texts]}`` and read ``{"embeddings": [[...]]}``."""

    def __init__(self, url: str, model: str = "", api_key_env: str | None = None,
                 timeout: float = 30.0, batch_size: int = 32, max_in_flight: int = 4,
                 transport: httpx.BaseTransport | None = None):
        self.url = url
        self.model = model
        self.batch_size = batch_size
        self.max_in_flight = max(1, max_in_flight)
        headers = {}
        if api_key_env and os.environ.get(api_key_env):
            headers["Authorization"] = f"Bearer {os.environ[api_key_env]}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.dim = None

    def _post(self, batch: list[str]) -> np.ndarray:
        try:
            resp = self._client.post(self.url, json={"model": self.model, "input": batch})
            resp.raise_for_status()
            vecs = np.asarray(resp.json()["embeddings"], dtype=np.float64)
        except (httpx.HTTPError, KeyError, ValueError, TypeError) as exc:
            raise ProviderError(f"embedding request failed: {exc}", text=batch[0]) from exc
        if vecs.ndim != 2 or len(vecs) != len(batch):
            raise ProviderError(f"expected {len(batch)} embeddings, got shape {vecs.shape}", text=batch[0])
        return vecs

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        batches = [texts[i:i + self.batch_size] for i in range(0, len(texts), self.batch_size)]
        if not batches:
            return np.empty((0, self.dim or 0))
        if self.max_in_flight > 1 and len(batches) > 1:
            with ThreadPoolExecutor(self.max_in_flight) as pool:
                parts = list(pool.map(self._post, batches))
        else:
            parts = [self._post(b) for b in batches]
        out = np.vstack(parts)
        if self.dim is None:
            self.dim = out.shape[1]
        elif out.shape[1] != self.dim:
            raise ProviderError(f"provider dimensionality changed from {self.dim} to {out.shape[1]}")
        return out

    def close(self):
        self._client.close()


class FileEmbeddingProvider:
    """Precomputed embeddings from a JSONL file of ``{"digest", "embedding"}`` records."""

    def __init__(self, path):
        self.table: dict[str, np.ndarray] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    self.table[rec["digest"]] = np.asarray(rec["embedding"], dtype=np.float64)
                except (ValueError, KeyError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad embedding record ({exc})") from exc
        dims = {v.shape[0] for v in self.table.values()}
        if len(dims) > 1:
            raise ValueError(f"{path}: mixed dimensionalities {sorted(dims)}")
        self.dim = dims.pop() if dims else None

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = []
        for t in texts:
            vec = self.table.get(text_digest(t))
            if vec is None:
                raise ProviderError("text not present in embedding file", text=t)
            out.append(vec)
        return np.vstack(out) if out else np.empty((0, self.dim or 0))


class MemoizedProvider:
    """Digest-keyed cache in front of a provider; ``calls`` counts texts sent upstream."""

    def __init__(self, provider):
        self.provider = provider
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.calls = 0

    @property
    def dim(self):
        return self.provider.dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        digests = [text_digest(t) for t in texts]
        with self._lock:
            missing = {}
            for d, t in zip(digests, texts):
                if d not in self._cache and d not in missing:
                    missing[d] = t
        if missing:
            vecs = self.provider.embed(list(missing.values()))
            with self._lock:
                self.calls += len(missing)
                for d, v in zip(missing, vecs):
                    self._cache[d] = v
        with self._lock:
            return np.vstack([self._cache[d] for d in digests])


def make_provider(kind: str, **options):
    """Build a provider from a config kind: ``mock``, ``http`` or ``file``."""
    if kind == "mock":
        return MockEmbeddingProvider(**options)
    if kind == "http":
        return HttpEmbeddingProvider(**options)
    if kind == "file":
        return FileEmbeddingProvider(**options)
    raise ValueError(f"unknown embedding provider kind {kind!r}")


# ---------------------------------------------------------------------------
# features


def _memo(provider):
    return provider if isinstance(provider, MemoizedProvider) else MemoizedProvider(provider)


def compute_features(p: str, p_eps: str, r_slm: str, r_slm_eps: str, epsilon: float,
                     provider) -> FeatureVector:
    """Features A-D: epsilon, sim(p, p_eps), sim(p, r_slm), sim(p, r_slm_eps)."""
    return compute_features_batch([(p, p_eps, r_slm, r_slm_eps, epsilon)], provider)[0]


def compute_features_batch(records: Iterable[tuple[str, str, str, str, float]], provider) -> list[FeatureVector]:
    records = list(records)
    for rec in records:
        for text in rec[:4]:
            if not text:
                raise ValueError("feature texts must be non-empty")
    memo = _memo(provider)
    texts = [t for rec in records for t in rec[:4]]
    vecs = memo.embed(texts) if texts else None
    out = []
    for j, rec in enumerate(records):
        p, pe, rs, rse = vecs[4 * j: 4 * j + 4]
        out.append(FeatureVector(float(rec[4]), cosine_similarity(p, pe),
                                 cosine_similarity(p, rs), cosine_similarity(p, rse)))
    return out


def realized_target(p: str, r_llm_eps: str, provider) -> float:
    """Target E, computed exactly like feature D but on the LLM result."""
    vecs = _memo(provider).embed([p, r_llm_eps])
    return cosine_similarity(vecs[0], vecs[1])


def token_change_stats(original_ids: Sequence[int], sanitized_ids: Sequence[int]) -> float:
    """Percentage of positions left unchanged by sanitization."""
    a = np.asarray(original_ids)
    b = np.asarray(sanitized_ids)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ValueError("empty token sequence")
    return 100.0 * float(np.count_nonzero(a == b)) / a.size

