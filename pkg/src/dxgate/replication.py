"""Output-frequency and corpus-level experiments for the sanitization mechanism."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .embedding_store import EmbeddingModel
from .mechanism import (
    NEAREST_TOKEN,
    SanitizationConfig,
    position_rng,
    sanitize_repeated,
    sanitize_text,
)
from .quality import MemoizedProvider, ProviderError, cosine_similarity, token_change_stats
from .tokenize import detokenize, split_words, tokenize_words

log = logging.getLogger(__name__)

__all__ = [
    "ReplicationReport",
    "SweepCurve",
    "Document",
    "word_frequency_experiment",
    "self_return_curve",
    "sample_words",
    "corpus_sweep",
    "load_corpus",
    "reports_to_csv",
    "curves_to_csv",
]


def _eps_key(epsilon: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", float(epsilon)))[0]


@dataclass
class ReplicationReport:
    word: str
    epsilon: float
    trials: int
    backend: str
    variant: str
    top_outputs: list[tuple[str, int]]
    self_return_count: int

    def as_dict(self) -> dict:
        d = asdict(self)
        d["top_outputs"] = [[w, c] for w, c in self.top_outputs]
        return d


@dataclass
class SweepCurve:
    metric: str  # "self_return" | "similarity" | "unchanged_pct"
    epsilons: list[float]
    values: list[float]
    sample_size: int
    trials: int
    backend: str = "exact"
    partial: bool = False
    error: str | None = None
    per_item: list[list[float]] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_item")
        return d


@dataclass(frozen=True)
class Document:
    id: str
    text: str


def word_frequency_experiment(model: EmbeddingModel, word: str, epsilon: float, trials: int = 1000,
                              backend: str = "exact", variant: str = NEAREST_TOKEN, seed: int = 0,
                              index=None, ann_params=None, top: int | None = None,
                              threads: int | None = None) -> ReplicationReport:
    """Sanitize ``word`` ``trials`` times and tally the outputs."""
    if word not in model:
        raise KeyError(f"word {word!r} is not in the vocabulary of {model.name}")
    wid = model.lookup(word)
    config = SanitizationConfig(epsilon, variant=variant, nn_backend=backend, rng_seed=seed,
                                ann_params=ann_params)
    rng = position_rng(seed, wid, _eps_key(epsilon))
    outs = sanitize_repeated(model, wid, config, trials, rng, index=index, threads=threads)
    counts = Counter(int(x) for x in outs)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if top is not None:
        ranked = ranked[:top]
    return ReplicationReport(word, float(epsilon), trials, backend, variant,
                             [(model.token(i), c) for i, c in ranked], counts.get(wid, 0))


def sample_words(model: EmbeddingModel, size: int, seed: int = 0) -> list[str]:
    """Reproducible sample of vocabulary words, skipping zero-norm rows."""
    ids = model.nonzero_ids()
    rng = np.random.default_rng([seed, 0x5EED])
    pick = rng.choice(ids, size=min(size, len(ids)), replace=False)
    return [model.token(int(i)) for i in np.sort(pick)]


def self_return_curve(model: EmbeddingModel, word_sample: Sequence[str], epsilons: Sequence[float],
                      trials: int = 200, backend: str = "exact", seed: int = 0,
                      variant: str = NEAREST_TOKEN, index=None, ann_params=None,
                      threads: int | None = None) -> SweepCurve:
    """Mean self-return count over ``word_sample`` at each epsilon."""
    if not word_sample:
        raise ValueError("word_sample must be non-empty")
    values, per_item = [], []
    for eps in epsilons:
        row = [word_frequency_experiment(model, w, eps, trials, backend, variant, seed,
                                         index=index, ann_params=ann_params,
                                         threads=threads).self_return_count
               for w in word_sample]
        per_item.append([float(x) for x in row])
        values.append(float(np.mean(row)))
    return SweepCurve("self_return", [float(e) for e in epsilons], values, len(word_sample), trials,
                      backend=backend, per_item=per_item)


def corpus_sweep(model: EmbeddingModel, corpus: Sequence[Document], epsilons: Sequence[float],
                 config: SanitizationConfig, quality_provider, seed: int = 0,
                 lowercase: bool = True, index=None, threads: int | None = None) -> dict[str, SweepCurve]:
    """Mean prompt/sanitized similarity and mean % unchanged tokens per epsilon.

    A provider failure stops the sweep; curves then hold the completed grid
    points and are marked ``partial``.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    provider = quality_provider if isinstance(quality_provider, MemoizedProvider) \
        else MemoizedProvider(quality_provider)
    tokenized = [tokenize_words(doc.text, model, lowercase, config.oov_policy) for doc in corpus]
    sim = SweepCurve("similarity", [], [], len(corpus), 1, backend=config.nn_backend)
    unchanged = SweepCurve("unchanged_pct", [], [], len(corpus), 1, backend=config.nn_backend)
    for eps in epsilons:
        cfg = SanitizationConfig(eps, config.variant, config.nn_backend, config.oov_policy, seed,
                                 config.tail_mass_delta, config.ann_params)
        sims, pcts = [], []
        try:
            for d_idx, (doc, (ids, tmap)) in enumerate(zip(corpus, tokenized)):
                if not ids:
                    continue
                st = sanitize_text(model, ids, cfg, stream=(d_idx, _eps_key(eps)), index=index, threads=threads)
                text_eps = detokenize(st.sanitized_token_ids, tmap, model)
                vecs = provider.embed([doc.text, text_eps])
                sims.append(cosine_similarity(vecs[0], vecs[1]))
                pcts.append(token_change_stats(st.original_token_ids, st.sanitized_token_ids))
        except ProviderError as exc:
            log.error("provider failure at epsilon=%s: %s", eps, exc)
            for c in (sim, unchanged):
                c.partial = True
                c.error = str(exc)
            break
        for curve, vals in ((sim, sims), (unchanged, pcts)):
            curve.epsilons.append(float(eps))
            curve.values.append(float(np.mean(vals)) if vals else math.nan)
            curve.per_item.append(vals)
    return {"similarity": sim, "unchanged_pct": unchanged}


def load_corpus(path, max_tokens: int = 1024, sample_size: int | None = None, seed: int = 0) -> list[Document]:
    """Read ``{"id", "text"}`` JSONL records, drop long documents, sample reproducibly."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc = Document(str(rec["id"]), rec["text"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed corpus record ({exc})") from exc
            if not isinstance(doc.text, str):
                raise ValueError(f"{path}:{lineno}: malformed corpus record (text is not a string)")
            if len(split_words(doc.text)[0]) <= max_tokens:
                docs.append(doc)
    if sample_size is None:
        return docs
    if sample_size > len(docs):
        log.warning("sample_size %d exceeds the %d documents left after filtering; using all",
                    sample_size, len(docs))
        return docs
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(docs), size=sample_size, replace=False))
    return [docs[i] for i in pick]


# ---------------------------------------------------------------------------
# output


def reports_to_csv(reports: Sequence[ReplicationReport], top: int = 3) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["word", "epsilon", "backend", "variant", "trials", "self_return", "top_outputs"])
    for r in reports:
        tops = ";".join(f"{tok}:{c}" for tok, c in r.top_outputs[:top])
        w.writerow([r.word, repr(r.epsilon), r.backend, r.variant, r.trials, r.self_return_count, tops])
    return buf.getvalue()


def curves_to_csv(curves: Sequence[SweepCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "backend", "epsilon", "value", "sample_size", "trials", "partial"])
    for c in curves:
        for eps, val in zip(c.epsilons, c.values):
            w.writerow([c.metric, c.backend, repr(eps), repr(val), c.sample_size, c.trials, int(c.partial)])
    return buf.getvalue()
