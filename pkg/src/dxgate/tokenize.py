"""Whitespace-and-punctuation word splitting for word-level embedding models."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

from .mechanism import OOV_ID, OutOfVocabularyError

__all__ = ["TokenMap", "tokenize_words", "detokenize", "split_words"]

_WORD_RE = re.compile(r"\w+(?:['’]\w+)*|[^\w\s]", re.UNICODE)


@dataclass(frozen=True)
class TokenMap:
    """What :func:`detokenize` needs to rebuild the surface text.

    ``separators`` has ``len(surfaces) + 1`` entries: leading text, the gaps
    between tokens, and trailing text.
    """

    surfaces: tuple[str, ...]
    separators: tuple[str, ...]
    original_ids: tuple[int, ...]

    @property
    def words(self) -> list[str]:
        return list(self.surfaces)


_WORD_START = re.compile(r"\w")
_WORD_END = re.compile(r"\w$")


def split_words(text: str) -> tuple[list[str], list[str]]:
    surfaces, seps = [], []
    pos = 0
    for m in _WORD_RE.finditer(text):
        seps.append(text[pos:m.start()])
        surfaces.append(m.group())
        pos = m.end()
    seps.append(text[pos:])
    return surfaces, seps


def tokenize_words(text: str, model=None, lowercase: bool = True,
                   oov_policy: str = "error") -> tuple[list[int], TokenMap]:
    """Split ``text`` and map each word to a row id of ``model``.

    Unknown words raise :class:`OutOfVocabularyError` under ``oov_policy="error"``
    and map to :data:`OOV_ID` under ``"passthrough_flagged"``. Without a model
    every id is :data:`OOV_ID`.
    """
    surfaces, seps = split_words(text)
    ids = []
    for pos, word in enumerate(surfaces):
        key = word.lower() if lowercase else word
        tid = model.get_id(key) if model is not None else None
        if tid is None:
            if model is not None and oov_policy == "error":
                raise OutOfVocabularyError(pos, word)
            tid = OOV_ID
        ids.append(int(tid))
    return ids, TokenMap(tuple(surfaces), tuple(seps), tuple(ids))


def detokenize(ids: Sequence[int], token_map: TokenMap, model=None) -> str:
    """Rebuild text; positions whose id is unchanged keep their original surface form.

    Where two adjacent outputs would fuse into a single word (an empty original
    separator between word characters), a space is inserted instead.
    """
    if len(ids) != len(token_map.surfaces):
        raise ValueError(f"expected {len(token_map.surfaces)} ids, got {len(ids)}")
    words = []
    for i, tid in enumerate(ids):
        tid = int(tid)
        if tid == token_map.original_ids[i] or tid == OOV_ID or model is None:
            words.append(token_map.surfaces[i])
        else:
            words.append(model.token(tid))
    parts = [token_map.separators[0]]
    for i, w in enumerate(words):
        if i and not token_map.separators[i] and _WORD_END.search(words[i - 1]) and _WORD_START.match(w):
            parts.append(" ")
        parts.append(w)
        parts.append(token_map.separators[i + 1])
    return "".join(parts)
