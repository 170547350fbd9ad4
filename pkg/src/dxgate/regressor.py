"""Histogram-based gradient-boosted regression trees for utility prediction.

Squared-error loss, depth-wise trees over quantile bins computed on the
training split. A prediction is ``base + learning_rate * sum(tree outputs)``,
clamped to ``[-1, 1]``.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .quality import FEATURE_COLUMNS, FeatureVector

__all__ = [
    "FEATURE_SETS",
    "Dataset",
    "Hyperparams",
    "GbdtModel",
    "EvalReport",
    "ModelFormatError",
    "fit",
    "train",
    "predict",
    "evaluate",
    "save_model",
    "load_model",
    "model_to_bytes",
    "model_from_bytes",
    "read_feature_csv",
    "write_feature_csv",
]

FEATURE_SETS = {"A": ("epsilon",), "ABCD": FEATURE_COLUMNS}
ERROR_MARGIN = 0.1

_MAGIC = b"DXGBDT\x00"
_VERSION = 1
_HEAD = struct.Struct("<7sHI")


class ModelFormatError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # (rows, len(feature_names))
    targets: np.ndarray
    feature_names: tuple[str, ...] = FEATURE_COLUMNS
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.targets), -1)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.features.shape[1] != len(self.feature_names):
            raise ValueError("feature matrix width does not match feature_names")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite values")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.targets))]

    def __len__(self):
        return len(self.targets)

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector], ids: Sequence[str] | None = None) -> "Dataset":
        rows = [v for v in vectors if v.target_e is not None]
        if len(rows) != len(vectors):
            raise ValueError("every row needs a realized target_e")
        feats = np.array([[getattr(v, c) for c in FEATURE_COLUMNS] for v in rows], dtype=np.float64)
        return cls(feats.reshape(len(rows), len(FEATURE_COLUMNS)),
                   np.array([v.target_e for v in rows], dtype=np.float64),
                   FEATURE_COLUMNS, list(ids) if ids else [])

    def select(self, feature_set: str | Sequence[str]) -> "Dataset":
        names = FEATURE_SETS[feature_set] if isinstance(feature_set, str) else tuple(feature_set)
        cols = [self.feature_names.index(n) for n in names]
        return Dataset(self.features[:, cols], self.targets, tuple(names), list(self.ids))

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.features[rows], self.targets[rows], self.feature_names,
                       [self.ids[i] for i in rows])


@dataclass(frozen=True)
class Hyperparams:
    max_bins: int = 255
    max_iter: int = 100
    learning_rate: float = 0.1
    max_depth: int = 6
    min_samples_leaf: int = 20


@dataclass
class GbdtModel:
    feature_names: tuple[str, ...]
    bin_edges: list[np.ndarray]
    base_prediction: float
    learning_rate: float
    # per tree: feature, threshold_bin, left, right (int arrays); value (float array)
    trees: list[dict[str, np.ndarray]] = field(default_factory=list)
    train_rmse: list[float] = field(default_factory=list)

    def bin(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape, dtype=np.int32)
        for j, edges in enumerate(self.bin_edges):
            out[:, j] = np.searchsorted(edges, X[:, j], side="left")
        return out

    def raw_predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        binned = self.bin(X)
        pred = np.full(len(X), self.base_prediction)
        rows = np.arange(len(X))
        for tree in self.trees:
            pred += self.learning_rate * _tree_output(tree, binned, rows)
        return pred


@dataclass
class EvalReport:
    r2: float | None
    rmse: float
    wasted_pct: float
    failed_pct: float
    n: int
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(d["r2"], d["rmse"], d["wasted_pct"], d["failed_pct"], d["n"], list(d.get("flags", [])))


def _tree_output(tree, binned, rows):
    node = np.zeros(len(rows), dtype=np.int64)
    feat, thr, left, right = tree["feature"], tree["threshold"], tree["left"], tree["right"]
    active = left[node] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        n = node[idx]
        go_left = binned[rows[idx], feat[n]] <= thr[n]
        node[idx] = np.where(go_left, left[n], right[n])
        active = left[node] >= 0
    return tree["value"][node]


# ---------------------------------------------------------------------------
# fitting


def _bin_edges(column: np.ndarray, max_bins: int) -> np.ndarray:
    uniq = np.unique(column)
    if len(uniq) <= max_bins:
        return (uniq[:-1] + uniq[1:]) / 2.0
    qs = np.percentile(column, np.linspace(0, 100, max_bins + 1)[1:-1], method="midpoint")
    return np.unique(qs)


def _grow_tree(binned, resid, n_bins, hp: Hyperparams):
    feature, threshold, left, right, value = [], [], [], [], []

    def add(v):
        feature.append(-1)
        threshold.append(-1)
        left.append(-1)
        right.append(-1)
        value.append(v)
        return len(value) - 1

    root = add(float(resid.mean()))
    stack = [(root, np.arange(len(resid)), 0)]
    min_leaf = hp.min_samples_leaf
    while stack:
        node, idx, depth = stack.pop()
        if depth >= hp.max_depth or len(idx) < 2 * min_leaf:
            continue
        r = resid[idx]
        total, n = r.sum(), len(idx)
        parent = total * total / n
        best = (1e-12, -1, -1)
        for f in range(binned.shape[1]):
            b = binned[idx, f]
            s = np.cumsum(np.bincount(b, weights=r, minlength=n_bins[f]))[:-1]
            c = np.cumsum(np.bincount(b, minlength=n_bins[f]))[:-1]
            ok = (c >= min_leaf) & (n - c >= min_leaf)
            if not ok.any():
                continue
            c_ok, s_ok = c[ok], s[ok]
            gain = s_ok * s_ok / c_ok + (total - s_ok) ** 2 / (n - c_ok) - parent
            k = int(np.argmax(gain))
            if gain[k] > best[0]:
                best = (float(gain[k]), f, int(np.flatnonzero(ok)[k]))
        if best[1] < 0:
            continue
        _, f, t = best
        mask = binned[idx, f] <= t
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, t
        left[node] = add(float(resid[li].mean()))
        right[node] = add(float(resid[ri].mean()))
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return {
        "feature": np.asarray(feature, dtype=np.int64),
        "threshold": np.asarray(threshold, dtype=np.int64),
        "left": np.asarray(left, dtype=np.int64),
        "right": np.asarray(right, dtype=np.int64),
        "value": np.asarray(value, dtype=np.float64),
    }


def fit(dataset: Dataset, hyperparams: Hyperparams | None = None) -> GbdtModel:
    """Fit on all rows of ``dataset``."""
    hp = hyperparams or Hyperparams()
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    X, y = dataset.features, dataset.targets
    edges = [_bin_edges(X[:, j], hp.max_bins) for j in range(X.shape[1])]
    model = GbdtModel(tuple(dataset.feature_names), edges, float(y.mean()), hp.learning_rate)
    binned = model.bin(X)
    n_bins = [len(e) + 1 for e in edges]
    pred = np.full(len(y), model.base_prediction)
    rows = np.arange(len(y))
    model.train_rmse.append(float(np.sqrt(np.mean((y - pred) ** 2))))
    for _ in range(hp.max_iter):
        tree = _grow_tree(binned, y - pred, n_bins, hp)
        if len(tree["value"]) == 1 and abs(tree["value"][0]) < 1e-15:
            break
        model.trees.append(tree)
        pred = pred + hp.learning_rate * _tree_output(tree, binned, rows)
        model.train_rmse.append(float(np.sqrt(np.mean((y - pred) ** 2))))
    return model


def split_indices(n: int, seed: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def train(dataset: Dataset, hyperparams: Hyperparams | None = None, split_seed: int = 0,
          feature_set: str | Sequence[str] | None = None) -> tuple[GbdtModel, EvalReport]:
    """80/20 seeded split, fit on the train part, report on the test part."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(dataset) < 10:
        raise ValueError(f"need at least 10 rows to train, got {len(dataset)}")
    if feature_set is not None:
        dataset = dataset.select(feature_set)
    tr, te = split_indices(len(dataset), split_seed)
    model = fit(dataset.subset(tr), hyperparams)
    test = dataset.subset(te)
    report = evaluate(predict(model, test.features), test.targets)
    if np.ptp(dataset.features, axis=0).max() == 0.0 and np.ptp(dataset.targets) > 0.0:
        report.flags.append("constant_features_r2_le_zero_risk")
    return model, report


def _feature_matrix(model: GbdtModel, features) -> np.ndarray:
    if isinstance(features, FeatureVector):
        features = features.as_dict()
    if isinstance(features, Mapping):
        missing = [n for n in model.feature_names if features.get(n) is None]
        if missing:
            raise KeyError(f"missing feature(s): {', '.join(missing)}")
        return np.array([[float(features[n]) for n in model.feature_names]])
    if isinstance(features, (list, tuple)) and features and isinstance(features[0], (FeatureVector, Mapping)):
        return np.vstack([_feature_matrix(model, f) for f in features])
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != len(model.feature_names):
        raise KeyError(f"expected {len(model.feature_names)} feature columns "
                       f"({', '.join(model.feature_names)}), got {X.shape[1]}")
    return X


def predict(model: GbdtModel, features) -> np.ndarray | float:
    """Predicted target(s) clamped to [-1, 1].

    Accepts a FeatureVector or mapping (returns a float) or a row matrix whose
    columns follow ``model.feature_names``.
    """
    scalar = isinstance(features, (FeatureVector, Mapping))
    out = np.clip(model.raw_predict(_feature_matrix(model, features)), -1.0, 1.0)
    return float(out[0]) if scalar else out


def evaluate(predictions, targets) -> EvalReport:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValueError("cannot evaluate zero predictions")
    resid = t - p
    ss_res = float(resid @ resid)
    ss_tot = float(((t - t.mean()) ** 2).sum())
    flags = []
    if ss_tot == 0.0:
        r2 = None
        flags.append("r2_undefined_constant_target")
    else:
        r2 = 1.0 - ss_res / ss_tot
    rmse = math.sqrt(ss_res / p.size)
    wasted = 100.0 * np.count_nonzero(t < p - ERROR_MARGIN) / p.size
    failed = 100.0 * np.count_nonzero(np.abs(resid) > ERROR_MARGIN) / p.size
    return EvalReport(r2, rmse, float(wasted), float(failed), int(p.size), flags)


# ---------------------------------------------------------------------------
# persistence


def model_to_bytes(model: GbdtModel) -> bytes:
    doc = {
        "feature_names": list(model.feature_names),
        "bin_edges": [e.tolist() for e in model.bin_edges],
        "base_prediction": model.base_prediction,
        "learning_rate": model.learning_rate,
        "trees": [{k: v.tolist() for k, v in t.items()} for t in model.trees],
        "train_rmse": model.train_rmse,
    }
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEAD.pack(_MAGIC, _VERSION, len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def model_from_bytes(raw: bytes) -> GbdtModel:
    if len(raw) < _HEAD.size or raw[:7] != _MAGIC:
        raise ModelFormatError("not a dxgate regressor file (bad magic)")
    _, version, length = _HEAD.unpack_from(raw)
    if version != _VERSION:
        raise ModelFormatError(f"unsupported regressor format version {version}")
    payload = raw[_HEAD.size:_HEAD.size + length]
    tail = raw[_HEAD.size + length:]
    if len(payload) != length or len(tail) != 4:
        raise ModelFormatError("regressor file is truncated or has trailing bytes")
    if struct.unpack("<I", tail)[0] != zlib.crc32(payload):
        raise ModelFormatError("regressor payload checksum mismatch (corrupted file)")
    doc = json.loads(payload)
    trees = [{
        "feature": np.asarray(t["feature"], dtype=np.int64),
        "threshold": np.asarray(t["threshold"], dtype=np.int64),
        "left": np.asarray(t["left"], dtype=np.int64),
        "right": np.asarray(t["right"], dtype=np.int64),
        "value": np.asarray(t["value"], dtype=np.float64),
    } for t in doc["trees"]]
    return GbdtModel(tuple(doc["feature_names"]), [np.asarray(e, dtype=np.float64) for e in doc["bin_edges"]],
                     doc["base_prediction"], doc["learning_rate"], trees, doc["train_rmse"])


def save_model(model: GbdtModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> GbdtModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# feature CSV (id, epsilon, sim_b, sim_c, sim_d, target_e)

CSV_COLUMNS = ("id",) + FEATURE_COLUMNS + ("target_e",)


def write_feature_csv(rows: Sequence[tuple[str, FeatureVector]], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rid, fv in rows:
        w.writerow([rid] + [repr(float(getattr(fv, c))) for c in FEATURE_COLUMNS]
                   + ["" if fv.target_e is None else repr(float(fv.target_e))])


def read_feature_csv(path, skip_unlabeled: bool = True) -> Dataset:
    """Rows with an empty ``target_e`` are skipped, or rejected when ``skip_unlabeled`` is false."""
    feats, targets, ids = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for lineno, rec in enumerate(reader, 2):
            if not rec["target_e"]:
                if skip_unlabeled:
                    continue
                raise ValueError(f"{path}:{lineno}: empty target_e")
            try:
                feats.append([float(rec[c]) for c in FEATURE_COLUMNS])
                targets.append(float(rec["target_e"]))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            ids.append(rec["id"])
    return Dataset(np.array(feats, dtype=np.float64).reshape(len(targets), len(FEATURE_COLUMNS)),
                   np.array(targets), FEATURE_COLUMNS, ids)
