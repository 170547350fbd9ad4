"""Synthetic models, corpora and mock endpoints shared by the tests."""

from __future__ import annotations

import json
import os
import threading

import numpy as np

from dxgate.embedding_store import EmbeddingModel

GLOVE_ENV = "DXGATE_GLOVE"

BASE_WORDS = (
    "the a an of to and in on at for with by from is was are be it this that he she they we you "
    "cat dog bird fish horse cow mouse rat lion tiger bear wolf fox deer sheep goat pig duck "
    "red blue green yellow black white brown grey pink orange purple gold silver "
    "run walk jump swim fly sit stand sleep eat drink read write sing dance play work rest "
    "house car road tree river hill city town park school market table chair door window "
    "big small old new fast slow hot cold good bad happy sad long short high low "
    "sun moon star sky rain snow wind cloud storm fire water earth stone sand "
    "encryption hockey spacecraft"
).split()
PUNCT = (",", ".", "!", "?", ";", ":")


def gaussian_model(n: int, dim: int, seed: int = 0, prefix: str = "t") -> EmbeddingModel:
    rng = np.random.default_rng(seed)
    return EmbeddingModel(tuple(f"{prefix}{i}" for i in range(n)), rng.standard_normal((n, dim)),
                          name=f"gauss{n}x{dim}")


def word_model(extra: int = 5000, dim: int = 32, seed: int = 0) -> EmbeddingModel:
    """Real-looking words + punctuation + ``extra`` filler tokens, Gaussian vectors."""
    vocab = list(BASE_WORDS) + list(PUNCT) + [f"filler{i}" for i in range(extra)]
    rng = np.random.default_rng(seed)
    return EmbeddingModel(tuple(vocab), rng.standard_normal((len(vocab), dim)), name=f"words{len(vocab)}")


def clustered_model(n: int = 20000, dim: int = 300, clusters: int = 400, seed: int = 0) -> EmbeddingModel:
    """Clustered vectors with GloVe-like norms and neighbor density.

    The three probe words of the word-frequency table live in the vocabulary.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((clusters, dim)) * 0.3
    assign = rng.integers(0, clusters, size=n)
    matrix = centers[assign] + rng.standard_normal((n, dim)) * 0.25
    vocab = [f"v{i}" for i in range(n)]
    for i, w in enumerate(("encryption", "hockey", "spacecraft")):
        vocab[i] = w
    return EmbeddingModel(tuple(vocab), matrix, name=f"clustered{n}x{dim}")


def write_glove(path, model: EmbeddingModel, fmt: str = "%.6f") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, row in zip(model.vocab, model.matrix):
            fh.write(tok + " " + " ".join(fmt % x for x in row) + "\n")


def glove_path() -> str | None:
    p = os.environ.get(GLOVE_ENV)
    return p if p and os.path.exists(p) else None


def corpus_texts(model: EmbeddingModel, n_docs: int, length: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    words = [w for w in model.vocab if w not in PUNCT]
    docs = []
    for _ in range(n_docs):
        toks = [words[i] for i in rng.integers(0, len(words), size=length)]
        text = " ".join(toks)
        docs.append(text[0].upper() + text[1:] + ".")
    return docs


def write_corpus(path, texts) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, t in enumerate(texts):
            fh.write(json.dumps({"id": f"doc{i}", "text": t}) + "\n")


class RecordingChat:
    """In-process chat client; ``fn`` maps the user message text to a reply."""

    def __init__(self, fn=None, fail: bool = False):
        self.fn = fn or (lambda text: text)
        self.fail = fail
        self.calls: list[tuple[list[dict], int | None]] = []
        self._lock = threading.Lock()

    def chat(self, messages, max_tokens=None):
        from dxgate.gateway.chat import EndpointError

        with self._lock:
            self.calls.append((list(messages), max_tokens))
        if self.fail:
            raise EndpointError("mock", "unavailable")
        return self.fn(messages[-1]["content"])


def task_body(content: str) -> str:
    """Text after the instruction line of a rendered template."""
    return content.split("\n\n", 1)[1] if "\n\n" in content else content


def extractive_summary(content: str, n: int = 12) -> str:
    words = task_body(content).split()
    return " ".join(words[:n]) or "empty"
