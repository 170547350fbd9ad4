"""Word-level dx-privacy sanitization with the multidimensional Laplace mechanism.

Per token: add noise with a uniform direction and Gamma(n, 1/epsilon)
magnitude to the token's embedding, snap the noisy point to its nearest
vocabulary token ``e``, and (``rank_sampled`` variant) draw the output from
``e``'s exact neighbor ranking with ``P(rank = i) ∝ exp(-epsilon * i)``.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .ann import AnnIndex, AnnParams, ann_nearest_batch, build_ann_index
from .embedding_store import EmbeddingModel, exact_nearest_batch

__all__ = [
    "NEAREST_TOKEN",
    "RANK_SAMPLED",
    "OOV_ID",
    "OutOfVocabularyError",
    "SanitizationConfig",
    "SanitizedText",
    "sample_noise",
    "sample_rank",
    "rank_probabilities",
    "rank_cutoff",
    "sanitize_token",
    "sanitize_repeated",
    "sanitize_text",
    "position_rng",
]

NEAREST_TOKEN = "nearest_token"
RANK_SAMPLED = "rank_sampled"
VARIANTS = (NEAREST_TOKEN, RANK_SAMPLED)
BACKENDS = ("exact", "approximate")
OOV_POLICIES = ("error", "passthrough_flagged")
OOV_ID = -1

_UINT64 = (1 << 64) - 1


class OutOfVocabularyError(KeyError):
    def __init__(self, position: int, token=None):
        self.position = position
        self.token = token
        super().__init__(f"out-of-vocabulary token {token!r} at position {position}")

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class SanitizationConfig:
    epsilon: float
    variant: str = RANK_SAMPLED
    nn_backend: str = "exact"
    oov_policy: str = "error"
    rng_seed: int = 0
    tail_mass_delta: float = 1e-12
    ann_params: AnnParams | None = None

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.nn_backend not in BACKENDS:
            raise ValueError(f"unknown nn_backend {self.nn_backend!r}")
        if self.oov_policy not in OOV_POLICIES:
            raise ValueError(f"unknown oov_policy {self.oov_policy!r}")
        if not 0.0 < self.tail_mass_delta < 1.0:
            raise ValueError("tail_mass_delta must be in (0, 1)")

    def with_epsilon(self, epsilon: float) -> "SanitizationConfig":
        return SanitizationConfig(epsilon, self.variant, self.nn_backend, self.oov_policy,
                                  self.rng_seed, self.tail_mass_delta, self.ann_params)


@dataclass(frozen=True)
class SanitizedText:
    original_token_ids: np.ndarray
    sanitized_token_ids: np.ndarray
    oov_flags: np.ndarray
    epsilon: float
    per_token_ranks: np.ndarray | None = None
    changed_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        n = len(self.original_token_ids)
        if len(self.sanitized_token_ids) != n or len(self.oov_flags) != n:
            raise ValueError("sequence lengths differ")
        if self.per_token_ranks is not None and len(self.per_token_ranks) != n:
            raise ValueError("rank sequence length differs")
        object.__setattr__(self, "changed_mask",
                           np.asarray(self.original_token_ids) != np.asarray(self.sanitized_token_ids))

    def __len__(self):
        return len(self.original_token_ids)

    @property
    def percent_changed(self) -> float:
        return 100.0 * float(self.changed_mask.mean()) if len(self) else 0.0


# ---------------------------------------------------------------------------
# sampling primitives


def sample_noise(n: int, epsilon: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Noise vector(s) with uniform direction and Gamma(n, 1/epsilon) norm."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    shape = (n,) if size is None else (size, n)
    g = rng.standard_normal(shape)
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    if math.isinf(epsilon):
        return g * 0.0
    mag = rng.gamma(shape=n, scale=1.0 / epsilon, size=None if size is None else (size, 1))
    return g * mag


def _ranks_from_uniforms(u, n_ranks: int, epsilon: float) -> np.ndarray:
    # CDF(i) = (1 - r^(i+1)) / (1 - r^N), r = exp(-epsilon), inverted in log space
    u = np.asarray(u, dtype=np.float64)
    if math.isinf(epsilon):
        return np.zeros(u.shape, dtype=np.int64)
    total = -np.expm1(-epsilon * n_ranks)
    i = np.floor(np.log1p(-u * total) / -epsilon)
    return np.clip(i, 0, n_ranks - 1).astype(np.int64)


def sample_rank(n_ranks: int, epsilon: float, rng: np.random.Generator, size: int | None = None):
    """Draw ranks in ``[0, n_ranks)`` with ``P(i) ∝ exp(-epsilon * i)``.

    Closed-form inverse CDF of the truncated geometric law, evaluated in log
    space so large epsilons do not underflow.
    """
    i = _ranks_from_uniforms(rng.random(size), n_ranks, epsilon)
    return i if size is not None else int(i)


def rank_probabilities(n_ranks: int, epsilon: float, rank_base: int = 0) -> np.ndarray:
    """Explicitly normalized weights ``exp(-epsilon * (i + rank_base))``."""
    logw = -epsilon * (np.arange(n_ranks, dtype=np.float64) + rank_base)
    return np.exp(logw - logsumexp(logw))


def rank_cutoff(epsilon: float, delta: float) -> int:
    """Ranks beyond this carry less than ``delta`` of the mass."""
    if math.isinf(epsilon):
        return 1
    return int(math.ceil(math.log(delta) / -epsilon)) + 1


def position_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & _UINT64, *key])))


# ---------------------------------------------------------------------------
# nearest-neighbor resolution

_INDEX_CACHE: "weakref.WeakKeyDictionary[EmbeddingModel, dict]" = weakref.WeakKeyDictionary()


def default_index(model: EmbeddingModel, params: AnnParams | None = None) -> AnnIndex:
    """Build (once per model and params) the approximate index."""
    params = params or AnnParams()
    per_model = _INDEX_CACHE.setdefault(model, {})
    if params not in per_model:
        per_model[params] = build_ann_index(model, params)
    return per_model[params]


def _resolve(model, points, config, index, threads):
    if config.nn_backend == "exact":
        ids, _ = exact_nearest_batch(model, points, 1, threads=threads)
        return ids[:, 0]
    if index is None:
        index = default_index(model, config.ann_params)
    ids, _ = ann_nearest_batch(index, points, 1)
    return ids[:, 0]


def _neighbors_from(model, centers: np.ndarray, ranks: np.ndarray, config, threads):
    """The ``ranks[j]``-th exact neighbor of token ``centers[j]`` (rank 0 = itself)."""
    out = centers.copy()
    need = ranks > 0
    if not need.any():
        return out
    k = min(len(model), max(rank_cutoff(config.epsilon, config.tail_mass_delta), int(ranks.max()) + 1))
    uniq, inverse = np.unique(centers[need], return_inverse=True)
    ids, _ = exact_nearest_batch(model, model.matrix[uniq].astype(np.float64), k, threads=threads)
    for row, tok in enumerate(uniq):
        r = ids[row]
        if r[0] != tok:
            # duplicate embeddings: keep the resolved token at rank 0
            rest = r[r != tok]
            ids[row] = np.concatenate(([tok], rest))[:k]
    out[need] = ids[inverse, ranks[need]]
    return out


def _sanitize_points(model, token_ids, noise, uniforms, config, index, threads):
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if config.nn_backend == "exact" and math.isinf(config.epsilon):
        resolved = token_ids.copy()
    else:
        points = model.matrix[token_ids].astype(np.float64) + noise
        resolved = _resolve(model, points, config, index, threads)
    if config.variant == NEAREST_TOKEN:
        return resolved, np.zeros(len(token_ids), dtype=np.int64)
    ranks = _ranks_from_uniforms(uniforms, len(model), config.epsilon)
    return _neighbors_from(model, resolved, ranks, config, threads), ranks


def _check_id(model, token_id):
    if not 0 <= int(token_id) < len(model):
        raise IndexError(f"token id {token_id} out of range for vocabulary of {len(model)}")


def sanitize_token(model: EmbeddingModel, token_id: int, config: SanitizationConfig,
                   rng: np.random.Generator, index: AnnIndex | None = None) -> tuple[int, int]:
    """Sanitize one token; returns ``(output_token_id, sampled_rank)``."""
    _check_id(model, token_id)
    noise = sample_noise(model.dim, config.epsilon, rng)
    u = rng.random()
    out, ranks = _sanitize_points(model, [token_id], noise[None, :], np.array([u]), config, index, 1)
    return int(out[0]), int(ranks[0])


def sanitize_repeated(model: EmbeddingModel, token_id: int, config: SanitizationConfig, trials: int,
                      rng: np.random.Generator, index: AnnIndex | None = None,
                      threads: int | None = None, batch: int = 2048) -> np.ndarray:
    """``trials`` independent sanitizations of one token (vectorized)."""
    _check_id(model, token_id)
    outs = []
    for start in range(0, trials, batch):
        m = min(batch, trials - start)
        noise = sample_noise(model.dim, config.epsilon, rng, size=m)
        u = rng.random(m)
        out, _ = _sanitize_points(model, np.full(m, token_id), noise, u, config, index, threads)
        outs.append(out)
    return np.concatenate(outs) if outs else np.empty(0, dtype=np.int64)


def sanitize_text(model: EmbeddingModel, token_ids: Sequence[int], config: SanitizationConfig,
                  oov_flags: Sequence[bool] | None = None, stream: Sequence[int] = (),
                  index: AnnIndex | None = None, threads: int | None = None) -> SanitizedText:
    """Sanitize every position independently.

    Position ``i`` draws from the substream keyed by ``(rng_seed, *stream, i)``
    so the output does not depend on evaluation order. Ids equal to
    :data:`OOV_ID` (or flagged in ``oov_flags``) are unknown words.
    """
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    flags = np.zeros(len(ids), dtype=bool) if oov_flags is None else np.asarray(oov_flags, dtype=bool).copy()
    flags |= (ids < 0) | (ids >= len(model))
    if flags.any() and config.oov_policy == "error":
        pos = int(np.flatnonzero(flags)[0])
        raise OutOfVocabularyError(pos, int(ids[pos]))
    original = np.where(flags, OOV_ID, ids)
    sanitized = original.copy()
    ranks = np.zeros(len(ids), dtype=np.int64)
    live = np.flatnonzero(~flags)
    if live.size:
        noise = np.empty((live.size, model.dim))
        u = np.empty(live.size)
        for j, pos in enumerate(live):
            rng = position_rng(config.rng_seed, *stream, int(pos))
            noise[j] = sample_noise(model.dim, config.epsilon, rng)
            u[j] = rng.random()
        out, r = _sanitize_points(model, original[live], noise, u, config, index, threads)
        sanitized[live] = out
        ranks[live] = r
    return SanitizedText(original, sanitized, flags, config.epsilon,
                         ranks if config.variant == RANK_SAMPLED else None)
