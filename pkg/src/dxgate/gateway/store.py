"""Append-only JSONL stores shared by concurrent requests."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import unicodedata
from typing import Callable

import numpy as np

from ..quality import FEATURE_COLUMNS
from ..regressor import Dataset

log = logging.getLogger(__name__)


def _append_line(path: str, record: dict) -> None:
    line = (json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o600)
    try:
        view = memoryview(line)
        while view:
            n = os.write(fd, view)
            view = view[n:]
        os.fsync(fd)
    finally:
        os.close(fd)


def cache_key(prompt: str, epsilon: float, model_name: str, variant: str) -> str:
    raw = json.dumps([unicodedata.normalize("NFC", prompt), repr(float(epsilon)), model_name, variant],
                     ensure_ascii=False)
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


class SanitizationCache:
    """Persistent map ``key -> value``; a key is written at most once.

    ``get_or_create`` is atomic per key, so concurrent first requests for the
    same prompt still produce a single stored sanitization.
    """

    def __init__(self, path: str | None):
        self.path = path
        self._data: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        if path and os.path.exists(path):
            self._load()

    def _load(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except ValueError:
                    log.warning("%s:%d: skipping unreadable cache record", self.path, lineno)
                    continue
                self._data.setdefault(rec["key"], rec)

    def __len__(self):
        return len(self._data)

    def get(self, key: str) -> dict | None:
        rec = self._data.get(key)
        return None if rec is None else rec["value"]

    def get_or_create(self, key: str, create: Callable[[], dict]) -> tuple[dict, bool]:
        """Return ``(value, hit)``; ``create`` runs only on a miss."""
        rec = self._data.get(key)
        if rec is not None:
            return rec["value"], True
        with self._lock:
            key_lock = self._key_locks.setdefault(key, threading.Lock())
        with key_lock:
            rec = self._data.get(key)
            if rec is not None:
                return rec["value"], True
            value = create()
            rec = {"key": key, "value": value, "ts": time.time()}
            if self.path:
                _append_line(self.path, rec)
            self._data[key] = rec
            return value, False


class TrainingLog:
    """Append-only record of gate outcomes; rows with a realized target train the regressor."""

    def __init__(self, path: str | None):
        self.path = path
        self._lock = threading.Lock()
        self._memory: list[dict] = []

    def append(self, record: dict) -> None:
        with self._lock:
            if self.path:
                _append_line(self.path, record)
            else:
                self._memory.append(dict(record))

    def records(self) -> list[dict]:
        if not self.path:
            return list(self._memory)
        return read_training_log(self.path)

    def export_training_set(self) -> Dataset:
        return records_to_dataset(self.records())


def read_training_log(path) -> list[dict]:
    out = []
    if not os.path.exists(path):
        return out
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: corrupt training-log record") from exc
    return out


def records_to_dataset(records) -> Dataset:
    rows = [r for r in records if r.get("realized_e") is not None]
    feats = np.array([[float(r[c]) for c in FEATURE_COLUMNS] for r in rows], dtype=np.float64)
    return Dataset(feats.reshape(len(rows), len(FEATURE_COLUMNS)),
                   np.array([float(r["realized_e"]) for r in rows]),
                   FEATURE_COLUMNS, [str(r.get("request_id", i)) for i, r in enumerate(rows)])
