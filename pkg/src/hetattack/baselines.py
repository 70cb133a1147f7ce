"""Comparison attacks: random and betweenness-guided edge additions and deletions.

All attacks only toggle edges between the victim and auxiliary nodes, so the
edit count is charged against the victim's own budget.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, SchemaError
from .hetgraph import EditedGraph, toggle_edge

MODES = ("add", "delete")


def edge_betweenness(graph, batch: int = 256) -> dict[tuple[int, int], float]:
    """Brandes edge betweenness of an unweighted undirected graph, keyed (u, v) with u < v.

    Each unordered node pair contributes the fraction of its shortest paths
    that use the edge.  Sources are processed in batches as dense BFS frontiers.
    """
    a = sp.csr_matrix(graph.adjacency, dtype=np.float64)
    n = a.shape[0]
    eu, ev = sp.triu(a, k=1).nonzero()
    order = np.lexsort((ev, eu))
    eu, ev = eu[order].astype(np.int64), ev[order].astype(np.int64)
    scores = np.zeros(len(eu))
    if len(eu) == 0:
        return {}
    for start in range(0, n, batch):
        src = np.arange(start, min(n, start + batch))
        b = len(src)
        sigma = np.zeros((b, n))
        dist = np.full((b, n), -1, dtype=np.int64)
        sigma[np.arange(b), src] = 1.0
        dist[np.arange(b), src] = 0
        frontier = np.zeros((b, n))
        frontier[np.arange(b), src] = 1.0
        level = 0
        while frontier.any():
            level += 1
            reach = np.asarray((a.T @ (sigma * frontier).T).T)
            new = (reach > 0) & (dist < 0)
            sigma[new] = reach[new]
            dist[new] = level
            frontier = new.astype(np.float64)
        delta = np.zeros((b, n))
        safe = np.where(sigma > 0, sigma, 1.0)
        for lv in range(level - 1, 0, -1):
            x = np.where(dist == lv, (1.0 + delta) / safe, 0.0)
            contrib = np.asarray((a @ x.T).T)
            delta += np.where(dist == lv - 1, sigma * contrib, 0.0)
        du, dv = dist[:, eu], dist[:, ev]
        su, sv = sigma[:, eu], sigma[:, ev]
        fwd = np.where((du >= 0) & (dv == du + 1), su * (1.0 + delta[:, ev]) / np.where(sv > 0, sv, 1.0), 0.0)
        bwd = np.where((dv >= 0) & (du == dv + 1), sv * (1.0 + delta[:, eu]) / np.where(su > 0, su, 1.0), 0.0)
        scores += fwd.sum(axis=0) + bwd.sum(axis=0)
    scores /= 2.0   # every unordered pair was counted from both endpoints
    return {(int(u), int(v)): float(s) for u, v, s in zip(eu, ev, scores)}


def node_betweenness(scores: dict, n: int) -> np.ndarray:
    """Per-node sum of incident edge betweenness."""
    out = np.zeros(n)
    for (u, v), s in scores.items():
        out[u] += s
        out[v] += s
    return out


def _check_victim(graph, victim):
    if graph.node_type_of[victim] != graph.schema.primary_type:
        raise SchemaError(f"victim {victim} is not of the primary type")


def _relation(graph, aux_type):
    return graph.schema.edge_between(graph.schema.primary_type, aux_type).name


def _aux_nodes(graph) -> np.ndarray:
    """Auxiliary nodes that share an edge type with the primary type."""
    out = []
    for t in graph.schema.auxiliary_types:
        try:
            _relation(graph, t)
        except SchemaError:
            continue
        out.append(graph.node_ids_by_type[t])
    return np.sort(np.concatenate(out)) if out else np.zeros(0, dtype=np.int64)


def victim_edges(graph, victim) -> list[int]:
    """Auxiliary neighbours of the victim, ascending."""
    nbrs = []
    for t in graph.schema.auxiliary_types:
        try:
            rel = _relation(graph, t)
        except SchemaError:
            continue
        nbrs.extend(int(x) for x in graph.neighbors(victim, rel))
    return sorted(nbrs)


def non_neighbors(graph, victim) -> np.ndarray:
    aux = _aux_nodes(graph)
    return aux[~np.isin(aux, victim_edges(graph, victim))]


def _apply(graph, victim, budget, nodes) -> EditedGraph:
    ov = EditedGraph(graph.base, budget) if not isinstance(graph, EditedGraph) else graph
    for u in nodes[:budget]:
        ov = toggle_edge(ov, victim, int(u), _relation(graph, graph.node_type_of[int(u)]))
    return ov


def random_edge_attack(graph, victim: int, budget: int, mode: str, rng) -> EditedGraph:
    """Toggle uniformly chosen victim-auxiliary pairs; the order is a random permutation."""
    _check_victim(graph, victim)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    pool = np.asarray(non_neighbors(graph, victim) if mode == "add" else victim_edges(graph, victim),
                      dtype=np.int64)
    return _apply(graph, victim, budget, rng.permutation(pool).tolist())


def betweenness_edge_attack(graph, victim: int, budget: int, mode: str, scores: dict,
                            node_scores: np.ndarray | None = None) -> EditedGraph:
    """Delete the victim's highest-betweenness edges, or add edges to the highest-betweenness nodes.

    ``scores`` comes from :func:`edge_betweenness` on the clean homogenized graph.
    Ties go to the smaller node id.
    """
    _check_victim(graph, victim)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "delete":
        nbrs = victim_edges(graph, victim)
        key = {u: scores.get((min(u, victim), max(u, victim)), 0.0) for u in nbrs}
        order = sorted(nbrs, key=lambda u: (-key[u], u))
    else:
        if node_scores is None:
            node_scores = node_betweenness(scores, graph.num_nodes)
        cand = non_neighbors(graph, victim)
        order = cand[np.lexsort((cand, -node_scores[cand]))].tolist()
    return _apply(graph, victim, budget, order)
