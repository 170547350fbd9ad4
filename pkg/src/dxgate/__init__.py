"""dx-privacy text sanitization with utility gating for LLM prompts."""

from .ann import AnnIndex, AnnParams, ann_nearest, build_ann_index
from .embedding_store import (
    EmbeddingModel,
    NeighborList,
    exact_nearest,
    load_binary,
    load_glove_text,
    save_binary,
)
from .mechanism import (
    SanitizationConfig,
    SanitizedText,
    sample_noise,
    sanitize_text,
    sanitize_token,
)
from .tokenize import detokenize, tokenize_words

__version__ = "0.1.0"

__all__ = [
    "AnnIndex",
    "AnnParams",
    "ann_nearest",
    "build_ann_index",
    "EmbeddingModel",
    "NeighborList",
    "exact_nearest",
    "load_binary",
    "load_glove_text",
    "save_binary",
    "SanitizationConfig",
    "SanitizedText",
    "sample_noise",
    "sanitize_text",
    "sanitize_token",
    "detokenize",
    "tokenize_words",
]
