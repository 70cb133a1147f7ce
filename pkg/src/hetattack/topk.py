"""KD-tree nearest neighbours and the test-time Top-K refinement of policy proposals.

Refinement takes the node the policy sampled, looks up its K nearest
same-type neighbours in embedding space, scores each candidate toggle through
the oracle and keeps the best one: a random label flipper when there is one,
otherwise the candidate with the highest NLL of the true label.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, InputError
from .hetgraph import toggle_edge


@dataclass
class KdTree:
    points: np.ndarray     # (n, d)
    ids: np.ndarray        # node id of each point row
    point: np.ndarray      # tree node -> point row
    dim: np.ndarray        # tree node -> splitting dimension
    left: np.ndarray       # tree node -> child tree node, -1 if none
    right: np.ndarray
    root: int

    def __len__(self):
        return len(self.ids)

    def in_order(self) -> list[int]:
        out, stack, t = [], [], self.root
        while stack or t >= 0:
            while t >= 0:
                stack.append(t)
                t = int(self.left[t])
            t = stack.pop()
            out.append(int(self.ids[self.point[t]]))
            t = int(self.right[t])
        return out


def build(points, ids=None) -> KdTree:
    """Median split on a cycling dimension; ties in the split coordinate go by node id."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise InputError("points must be a 2-D array (one row per point)")
    n, d = pts.shape
    if n == 0:
        raise InputError("cannot build a KD-tree over zero points")
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    if len(ids) != n:
        raise InputError("ids and points differ in length")
    point = np.empty(n, dtype=np.int64)
    dims = np.empty(n, dtype=np.int64)
    left = np.full(n, -1, dtype=np.int64)
    right = np.full(n, -1, dtype=np.int64)
    counter = [0]

    def rec(rows: np.ndarray, depth: int) -> int:
        if len(rows) == 0:
            return -1
        k = depth % d
        rows = rows[np.lexsort((ids[rows], pts[rows, k]))]
        mid = len(rows) // 2
        t = counter[0]
        counter[0] += 1
        point[t], dims[t] = rows[mid], k
        left[t] = rec(rows[:mid], depth + 1)
        right[t] = rec(rows[mid + 1:], depth + 1)
        return t

    root = rec(np.arange(n), 0)
    return KdTree(pts, ids, point, dims, left, right, root)


def knn(tree: KdTree, query, k: int, keep: Callable[[int], bool] | None = None) -> list[int]:
    """Ids of the ``k`` nearest accepted points, ascending (distance, id)."""
    if k < 1:
        raise InputError("k must be at least 1")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (tree.points.shape[1],):
        raise InputError("query dimension does not match the tree")
    pts, ids, point, dims, left, right = tree.points, tree.ids, tree.point, tree.dim, tree.left, tree.right
    heap: list[tuple[float, int]] = []   # max-heap of (-dist2, -id)

    def visit(t: int):
        row = point[t]
        nid = int(ids[row])
        if keep is None or keep(nid):
            diff = pts[row] - q
            d2 = float(diff @ diff)
            item = (-d2, -nid)
            if len(heap) < k:
                heapq.heappush(heap, item)
            elif item > heap[0]:
                heapq.heapreplace(heap, item)
        axis = dims[t]
        delta = q[axis] - pts[row, axis]
        near, far = (left[t], right[t]) if delta <= 0 else (right[t], left[t])
        if near >= 0:
            visit(near)
        if far >= 0 and (len(heap) < k or delta * delta <= -heap[0][0]):
            visit(far)

    visit(tree.root)
    return [-i for _, i in sorted(heap, key=lambda x: (-x[0], -x[1]))]


def brute_force_knn(points, ids, query, k: int, keep=None) -> list[int]:
    pts = np.asarray(points, dtype=np.float64)
    d2 = ((pts - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1)
    rows = [i for i in range(len(ids)) if keep is None or keep(int(ids[i]))]
    rows.sort(key=lambda i: (d2[i], int(ids[i])))
    return [int(ids[i]) for i in rows[:k]]


@dataclass
class TopKConfig:
    k_ratio: float = 0.005
    k_min: int = 1

    def __post_init__(self):
        if not 0.0 < self.k_ratio <= 1.0:
            raise ConfigError("k_ratio must lie in (0, 1]")
        if self.k_min < 1:
            raise ConfigError("k_min must be at least 1")

    def k_for(self, type_count: int) -> int:
        return max(self.k_min, int(round(self.k_ratio * type_count)))


class TypeTrees:
    """One KD-tree per auxiliary type over the clean-graph embeddings."""

    def __init__(self, graph, embeddings):
        self.embeddings = embeddings
        self.trees = {}
        for t in graph.schema.auxiliary_types:
            ids = graph.node_ids_by_type[t]
            if len(ids):
                self.trees[t] = build(embeddings.matrix[ids], ids)

    def knn(self, aux_type: str, node: int, k: int) -> list[int]:
        tree = self.trees.get(aux_type)
        if tree is None:
            return []
        return knn(tree, self.embeddings.matrix[node], k)


def refine(state, proposal: int, trees: TypeTrees, oracle, true_label: int, config: TopKConfig,
           rng, type_counts: dict | None = None) -> int:
    """Pick the final node to toggle among the proposal's K nearest same-type nodes."""
    g = state.graph
    aux_type = state.pending_type
    if g.node_type_of[proposal] != aux_type:
        raise InputError(f"proposal {proposal} is not of type {aux_type!r}")
    n_type = type_counts[aux_type] if type_counts else len(g.node_ids_by_type[aux_type])
    cands = trees.knn(aux_type, proposal, config.k_for(n_type))
    if not cands:
        return proposal
    rel = g.schema.edge_between(g.schema.primary_type, aux_type).name
    flippers, best, best_nll = [], None, -np.inf
    for c in sorted(cands):
        res = oracle.query(toggle_edge(g, state.victim, c, rel), state.victim, true_label)
        if res.label != true_label:
            flippers.append(c)
        elif res.nll > best_nll:
            best, best_nll = c, res.nll
    if flippers:
        return int(flippers[int(rng.integers(len(flippers)))])
    return int(best)
