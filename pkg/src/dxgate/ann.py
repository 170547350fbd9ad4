"""Approximate nearest-neighbor search with a forest of hyperplane-split trees.

Each tree recursively splits the rows with the perpendicular bisector of two
centroids found by a short 2-means run. Queries walk all trees best-first
(priority = smallest margin along the path) and collect the items of visited
leaves until the global candidate budget is met; candidates are then ranked
exactly. The default budget is ``tree_count * k``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .embedding_store import EmbeddingModel, NeighborList, _as_queries

__all__ = ["AnnParams", "AnnIndex", "build_ann_index", "ann_nearest"]

_TWO_MEANS_SAMPLE = 256
_TWO_MEANS_ITERS = 4
_MAX_IMBALANCE = 0.95


@dataclass(frozen=True)
class AnnParams:
    tree_count: int = 50
    leaf_size: int | None = None  # None: dim + 2
    search_budget: int | None = None  # None: tree_count * k
    build_seed: int = 0

    def __post_init__(self):
        if self.tree_count < 1:
            raise ValueError("tree_count must be >= 1")
        if self.leaf_size is not None and self.leaf_size < 1:
            raise ValueError("leaf_size must be >= 1")
        if self.search_budget is not None and self.search_budget < 1:
            raise ValueError("search_budget must be >= 1")


class _Tree:
    __slots__ = ("normals", "offsets", "children", "leaf_bounds", "items")

    def __init__(self, normals, offsets, children, leaf_bounds, items):
        self.normals = normals
        self.offsets = offsets
        self.children = children
        self.leaf_bounds = leaf_bounds
        self.items = items


def _two_means(points: np.ndarray, rng: np.random.Generator):
    n = len(points)
    i, j = rng.choice(n, size=2, replace=False)
    c = np.stack([points[i], points[j]]).astype(np.float64)
    sample = points if n <= _TWO_MEANS_SAMPLE else points[rng.choice(n, _TWO_MEANS_SAMPLE, replace=False)]
    sample = sample.astype(np.float64)
    for _ in range(_TWO_MEANS_ITERS):
        d0 = ((sample - c[0]) ** 2).sum(1)
        d1 = ((sample - c[1]) ** 2).sum(1)
        near0 = d0 <= d1
        if near0.all() or not near0.any():
            break
        c[0] = sample[near0].mean(0)
        c[1] = sample[~near0].mean(0)
    return c[0], c[1]


def _build_tree(matrix: np.ndarray, leaf_size: int, rng: np.random.Generator) -> _Tree:
    normals, offsets, children, leaf_bounds = [], [], [], []
    items: list[np.ndarray] = []
    n_items = 0
    zero = np.zeros(matrix.shape[1], dtype=np.float32)

    def new_node():
        normals.append(zero)
        offsets.append(0.0)
        children.append((-1, -1))
        leaf_bounds.append((0, 0))
        return len(normals) - 1

    root = new_node()
    stack = [(root, np.arange(len(matrix), dtype=np.int64))]
    while stack:
        node, idx = stack.pop()
        if len(idx) <= leaf_size:
            leaf_bounds[node] = (n_items, n_items + len(idx))
            items.append(idx)
            n_items += len(idx)
            continue
        pts = matrix[idx]
        side = None
        for _ in range(3):
            c0, c1 = _two_means(pts, rng)
            normal = c0 - c1
            norm = np.linalg.norm(normal)
            if norm == 0.0:
                continue
            normal /= norm
            offset = -float(normal @ (c0 + c1)) / 2.0
            side = (pts @ normal.astype(np.float32)) + offset > 0.0
            frac = side.mean()
            if max(frac, 1.0 - frac) <= _MAX_IMBALANCE:
                break
            side = None
        if side is None:
            # degenerate geometry: split at random with a zero-margin node
            normal = np.zeros(matrix.shape[1])
            offset = 0.0
            side = rng.random(len(idx)) < 0.5
            if side.all() or not side.any():
                side = np.zeros(len(idx), dtype=bool)
                side[: len(idx) // 2] = True
        left, right = new_node(), new_node()
        normals[node] = normal.astype(np.float32)
        offsets[node] = offset
        children[node] = (left, right)
        stack.append((right, idx[side]))
        stack.append((left, idx[~side]))

    return _Tree(
        np.vstack(normals),
        np.asarray(offsets, dtype=np.float64),
        np.asarray(children, dtype=np.int64),
        np.asarray(leaf_bounds, dtype=np.int64),
        np.concatenate(items) if items else np.empty(0, dtype=np.int64),
    )


class AnnIndex:
    """Immutable forest over an embedding model's rows."""

    def __init__(self, model: EmbeddingModel, params: AnnParams, trees: list[_Tree]):
        self.model = model
        self.params = params
        self.trees = trees

    @property
    def leaf_size(self) -> int:
        return self.params.leaf_size or self.model.dim + 2

    def candidates(self, query: np.ndarray, budget: int) -> np.ndarray:
        """Distinct row ids from leaves visited best-first until ``budget`` is met."""
        heap = [(-np.inf, t, 0) for t in range(len(self.trees))]
        heapq.heapify(heap)
        found: list[np.ndarray] = []
        count = 0
        while heap and count < budget:
            neg_pri, t, node = heapq.heappop(heap)
            tree = self.trees[t]
            left, right = tree.children[node]
            if left < 0:
                lo, hi = tree.leaf_bounds[node]
                found.append(tree.items[lo:hi])
                count += hi - lo
                continue
            margin = float(tree.normals[node] @ query) + tree.offsets[node]
            pri = -neg_pri
            heapq.heappush(heap, (-min(pri, margin), t, right))
            heapq.heappush(heap, (-min(pri, -margin), t, left))
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.unique(np.concatenate(found))


def build_ann_index(model: EmbeddingModel, params: AnnParams | None = None) -> AnnIndex:
    params = params or AnnParams()
    leaf_size = params.leaf_size or model.dim + 2
    trees = []
    for t in range(params.tree_count):
        rng = np.random.default_rng([params.build_seed, t])
        trees.append(_build_tree(model.matrix, leaf_size, rng))
    return AnnIndex(model, params, trees)


def ann_nearest(index: AnnIndex, query, k: int = 1, search_budget: int | None = None) -> NeighborList:
    """Approximate k nearest neighbors; may return fewer than k if the budget is tiny."""
    q = _as_queries(index.model, query)[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    budget = search_budget or index.params.search_budget or index.params.tree_count * k
    cand = index.candidates(q, budget)
    diff = index.model.matrix[cand].astype(np.float64) - q
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    pick = np.lexsort((cand, dist))[:k]
    return NeighborList(cand[pick], dist[pick], "approximate")


def ann_nearest_batch(index: AnnIndex, queries, k: int = 1, search_budget: int | None = None):
    q = _as_queries(index.model, queries)
    ids = np.full((len(q), k), -1, dtype=np.int64)
    dists = np.full((len(q), k), np.inf)
    for j in range(len(q)):
        nl = ann_nearest(index, q[j], k, search_budget)
        ids[j, : len(nl)] = nl.ids
        dists[j, : len(nl)] = nl.distances
    return ids, dists
