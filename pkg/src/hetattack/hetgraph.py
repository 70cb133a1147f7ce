"""Typed graph storage, metapath composition and budgeted structural edits.

Edges are undirected: an edge type ``r = (name, src, dst)`` stores ``A_r`` in its
declared orientation (rows of ``src`` nodes, columns of ``dst`` nodes) and is
traversable in both directions.  Relations whose endpoints share a type are
stored symmetrically.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BudgetError, InputError, SchemaError

ADD = "add"
DELETE = "delete"


@dataclass(frozen=True)
class EdgeType:
    name: str
    src: str
    dst: str

    def other_end(self, node_type: str) -> str:
        if node_type == self.src:
            return self.dst
        if node_type == self.dst:
            return self.src
        raise SchemaError(f"edge type {self.name!r} does not touch node type {node_type!r}")


@dataclass(frozen=True)
class TypeSchema:
    node_types: tuple[str, ...]
    edge_types: tuple[EdgeType, ...]
    primary_type: str

    def __post_init__(self):
        object.__setattr__(self, "node_types", tuple(self.node_types))
        ets = tuple(e if isinstance(e, EdgeType) else EdgeType(*e) for e in self.edge_types)
        object.__setattr__(self, "edge_types", ets)
        if len(set(self.node_types)) != len(self.node_types):
            raise SchemaError("duplicate node type names")
        names = [e.name for e in ets]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate edge type names")
        if len(self.node_types) + len(ets) <= 2:
            raise SchemaError("a heterogeneous graph needs |node types| + |edge types| > 2")
        if self.primary_type not in self.node_types:
            raise SchemaError(f"primary type {self.primary_type!r} is not a node type")
        for e in ets:
            if e.src not in self.node_types or e.dst not in self.node_types:
                raise SchemaError(f"edge type {e.name!r} references an unknown node type")

    @property
    def auxiliary_types(self) -> tuple[str, ...]:
        return tuple(t for t in self.node_types if t != self.primary_type)

    def edge_type(self, name: str) -> EdgeType:
        for e in self.edge_types:
            if e.name == name:
                return e
        raise SchemaError(f"unknown edge type {name!r}")

    def edge_between(self, type_a: str, type_b: str) -> EdgeType:
        """The unique edge type joining two node types (either orientation)."""
        found = [e for e in self.edge_types if {e.src, e.dst} == {type_a, type_b}]
        if len(found) != 1:
            raise SchemaError(
                f"expected exactly one edge type between {type_a!r} and {type_b!r}, found {len(found)}")
        return found[0]

    def to_dict(self) -> dict:
        return {
            "node_types": list(self.node_types),
            "edge_types": [[e.name, e.src, e.dst] for e in self.edge_types],
            "primary_type": self.primary_type,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TypeSchema":
        return cls(tuple(d["node_types"]), tuple(EdgeType(*e) for e in d["edge_types"]), d["primary_type"])


@dataclass(frozen=True)
class Metapath:
    """A walk pattern given as a sequence of edge-type names.

    Each step may be traversed in either direction; the node type reached is
    the other endpoint of the edge type.  ``Metapath(("pa", "pa"), "pap")`` is
    Paper -> Author -> Paper.
    """

    steps: tuple[str, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise SchemaError("metapath needs at least one step")
        if not self.name:
            object.__setattr__(self, "name", "-".join(self.steps))

    @property
    def length(self) -> int:
        return len(self.steps)

    def node_types(self, schema: TypeSchema, start: str | None = None) -> list[str]:
        """Node types visited along the walk, starting from ``start``.

        ``start`` defaults to the primary type.  Raises if a step does not
        touch the current type.
        """
        cur = schema.primary_type if start is None else start
        types = [cur]
        for name in self.steps:
            cur = schema.edge_type(name).other_end(cur)
            types.append(cur)
        return types

    def validate(self, schema: TypeSchema, classifier: bool = True) -> None:
        types = self.node_types(schema)
        if classifier and types[-1] != schema.primary_type:
            raise SchemaError(f"metapath {self.name!r} must end on the primary type")

    def is_palindromic(self, schema: TypeSchema) -> bool:
        types = self.node_types(schema)
        return self.steps == self.steps[::-1] and types == types[::-1]


def _binary_csr(rows, cols, n) -> sp.csr_matrix:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    m = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    m.sum_duplicates()
    m.data[:] = 1
    m.sort_indices()
    return m


class HeteroGraph:
    """Immutable heterogeneous graph.  Node ids are contiguous ints ``0..n-1``."""

    def __init__(self, schema: TypeSchema, node_type_of: Sequence[str],
                 typed_adjacency: dict[str, sp.csr_matrix], features: np.ndarray,
                 labels: np.ndarray):
        self.schema = schema
        self.node_type_of = tuple(node_type_of)
        self.typed_adjacency = typed_adjacency
        self.features = np.asarray(features, dtype=np.float64)
        self.features.setflags(write=False)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.labels.setflags(write=False)
        self.node_ids_by_type = {
            t: np.array([i for i, nt in enumerate(self.node_type_of) if nt == t], dtype=np.int64)
            for t in schema.node_types
        }
        self._type_index = np.array([schema.node_types.index(t) for t in self.node_type_of], dtype=np.int64)
        self._transposed = {name: a.T.tocsr() for name, a in typed_adjacency.items()}
        for m in self._transposed.values():
            m.sort_indices()
        self._block_cache: dict = {}
        self._homog = None

    @property
    def num_nodes(self) -> int:
        return len(self.node_type_of)

    @property
    def num_classes(self) -> int:
        lab = self.labels[self.labels >= 0]
        return int(lab.max()) + 1 if len(lab) else 0

    @property
    def primary_ids(self) -> np.ndarray:
        return self.node_ids_by_type[self.schema.primary_type]

    def type_index(self) -> np.ndarray:
        return self._type_index

    def num_edges(self, edge_type: str | None = None) -> int:
        if edge_type is not None:
            et = self.schema.edge_type(edge_type)
            nnz = self.typed_adjacency[edge_type].nnz
            return nnz // 2 if et.src == et.dst else nnz
        return sum(self.num_edges(e.name) for e in self.schema.edge_types)

    # -- adjacency queries (shared with EditedGraph) --------------------------
    @property
    def base(self) -> "HeteroGraph":
        return self

    def _orient(self, edge_type: str, u: int, v: int) -> tuple[int, int]:
        et = self.schema.edge_type(edge_type)
        tu, tv = self.node_type_of[u], self.node_type_of[v]
        if et.src == et.dst:
            if tu != et.src or tv != et.src:
                raise SchemaError(f"edge ({u},{v}) does not match edge type {edge_type!r}")
            return (min(u, v), max(u, v))
        if tu == et.src and tv == et.dst:
            return (u, v)
        if tu == et.dst and tv == et.src:
            return (v, u)
        raise SchemaError(f"edge ({u},{v}) of types ({tu},{tv}) does not match edge type "
                          f"{edge_type!r} ({et.src},{et.dst})")

    def base_has_edge(self, u: int, v: int, edge_type: str) -> bool:
        a, b = self._orient(edge_type, u, v)
        m = self.typed_adjacency[edge_type]
        row = m.indices[m.indptr[a]:m.indptr[a + 1]]
        i = np.searchsorted(row, b)
        return bool(i < len(row) and row[i] == b)

    has_edge = base_has_edge

    def base_neighbors(self, u: int, edge_type: str) -> np.ndarray:
        et = self.schema.edge_type(edge_type)
        t = self.node_type_of[u]
        if t == et.src:
            m = self.typed_adjacency[edge_type]
        elif t == et.dst:
            m = self._transposed[edge_type]
        else:
            raise SchemaError(f"node {u} of type {t!r} is not an endpoint of {edge_type!r}")
        return m.indices[m.indptr[u]:m.indptr[u + 1]]

    neighbors = base_neighbors

    def adjacency(self, edge_type: str) -> sp.csr_matrix:
        return self.typed_adjacency[edge_type]

    def edited_pairs(self) -> dict:
        return {}

    def fingerprint(self) -> str:
        """Content hash; used to prove the base graph is never mutated."""
        h = hashlib.sha256()
        for name in sorted(self.typed_adjacency):
            m = self.typed_adjacency[name]
            h.update(name.encode())
            h.update(m.indptr.tobytes())
            h.update(m.indices.tobytes())
            h.update(m.data.tobytes())
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def summary(self) -> dict:
        return {
            "nodes": {t: len(ids) for t, ids in self.node_ids_by_type.items()},
            "edges": {e.name: self.num_edges(e.name) for e in self.schema.edge_types},
        }


def build_graph(schema: TypeSchema, node_list: Iterable[tuple[int, str]],
                edge_list: Iterable[tuple[int, int, str]], features, labels) -> HeteroGraph:
    """Assemble a :class:`HeteroGraph`.

    ``node_list`` is ``(id, type)`` pairs with ids ``0..n-1``; ``labels`` maps
    primary node id to class index (dict or ``(id, class)`` pairs).
    """
    type_of: dict[int, str] = {}
    for nid, t in node_list:
        nid = int(nid)
        if nid in type_of:
            raise InputError(f"duplicate node id {nid}")
        if t not in schema.node_types:
            raise SchemaError(f"node {nid} has unknown type {t!r}")
        type_of[nid] = t
    n = len(type_of)
    if sorted(type_of) != list(range(n)):
        raise InputError("node ids must be contiguous integers starting at 0")
    node_type_of = [type_of[i] for i in range(n)]

    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != n:
        raise InputError(f"features must have shape ({n}, f), got {features.shape}")
    if not np.all(np.isfinite(features)):
        raise InputError("features contain non-finite values")

    rows: dict[str, list] = {e.name: [] for e in schema.edge_types}
    cols: dict[str, list] = {e.name: [] for e in schema.edge_types}
    tmp = HeteroGraph.__new__(HeteroGraph)
    tmp.schema, tmp.node_type_of = schema, node_type_of
    for u, v, r in edge_list:
        u, v = int(u), int(v)
        if u not in type_of or v not in type_of:
            raise InputError(f"edge ({u},{v}) references an unknown node")
        if r not in rows:
            raise SchemaError(f"unknown edge type {r!r}")
        if u == v:
            raise SchemaError(f"self-loop on node {u}")
        a, b = HeteroGraph._orient(tmp, r, u, v)
        rows[r].append(a)
        cols[r].append(b)
        if schema.edge_type(r).src == schema.edge_type(r).dst:
            rows[r].append(b)
            cols[r].append(a)
    adj = {name: _binary_csr(rows[name], cols[name], n) for name in rows}

    lab = np.full(n, -1, dtype=np.int64)
    items = labels.items() if isinstance(labels, dict) else labels
    for nid, c in items:
        nid = int(nid)
        if nid not in type_of:
            raise InputError(f"label for unknown node {nid}")
        if type_of[nid] != schema.primary_type:
            raise SchemaError(f"label given for non-primary node {nid}")
        if int(c) < 0:
            raise InputError(f"negative class index for node {nid}")
        lab[nid] = int(c)
    prim = [i for i in range(n) if node_type_of[i] == schema.primary_type]
    missing = [i for i in prim if lab[i] < 0]
    if missing:
        raise InputError(f"{len(missing)} primary nodes lack labels (first: {missing[0]})")
    return HeteroGraph(schema, node_type_of, adj, features, lab)


@dataclass(frozen=True)
class Edit:
    u: int
    v: int
    edge_type: str
    kind: str  # ADD | DELETE


class EditedGraph:
    """Copy-on-write overlay of a :class:`HeteroGraph` with a bounded edit log.

    Instances are treated as values: :func:`toggle_edge` returns a new overlay
    and never touches the base graph or the original overlay.
    """

    def __init__(self, base: HeteroGraph, budget: int, edits: tuple[Edit, ...] = (),
                 _overlay: dict | None = None):
        if int(budget) <= 0:
            raise BudgetError("budget must be a positive integer")
        self.base = base
        self.budget = int(budget)
        self.edits = tuple(edits)
        # (edge_type, a, b) in canonical orientation -> effective presence
        self._overlay: dict[tuple[str, int, int], bool] = dict(_overlay or {})
        if _overlay is None:
            for e in self.edits:
                self._apply(e.u, e.v, e.edge_type)

    # -- delegated attributes ---------------------------------------------------
    @property
    def schema(self) -> TypeSchema:
        return self.base.schema

    @property
    def node_type_of(self):
        return self.base.node_type_of

    @property
    def features(self):
        return self.base.features

    @property
    def labels(self):
        return self.base.labels

    @property
    def node_ids_by_type(self):
        return self.base.node_ids_by_type

    @property
    def num_nodes(self) -> int:
        return self.base.num_nodes

    def type_index(self):
        return self.base.type_index()

    # -- overlay ------------------------------------------------------------------
    def _apply(self, u, v, edge_type) -> str:
        key = (edge_type,) + self.base._orient(edge_type, u, v)
        present = self.has_edge(u, v, edge_type)
        new = not present
        if new == self.base.base_has_edge(u, v, edge_type):
            self._overlay.pop(key, None)
        else:
            self._overlay[key] = new
        return ADD if new else DELETE

    def has_edge(self, u: int, v: int, edge_type: str) -> bool:
        key = (edge_type,) + self.base._orient(edge_type, u, v)
        if key in self._overlay:
            return self._overlay[key]
        return self.base.base_has_edge(u, v, edge_type)

    def neighbors(self, u: int, edge_type: str) -> np.ndarray:
        nb = self.base.base_neighbors(u, edge_type)
        if not self._overlay:
            return nb
        add, drop = [], set()
        for (r, a, b), present in self._overlay.items():
            if r != edge_type or (a != u and b != u):
                continue
            other = b if a == u else a
            if present:
                add.append(other)
            else:
                drop.add(other)
        if not add and not drop:
            return nb
        out = [x for x in nb.tolist() if x not in drop] + add
        return np.array(sorted(out), dtype=np.int64)

    def adjacency(self, edge_type: str) -> sp.csr_matrix:
        changes = [(a, b, p) for (r, a, b), p in self._overlay.items() if r == edge_type]
        base = self.base.typed_adjacency[edge_type]
        if not changes:
            return base
        m = base.tolil(copy=True)
        symmetric = self.schema.edge_type(edge_type).src == self.schema.edge_type(edge_type).dst
        for a, b, p in changes:
            m[a, b] = 1 if p else 0
            if symmetric:
                m[b, a] = 1 if p else 0
        out = m.tocsr()
        out.eliminate_zeros()
        out.sort_indices()
        return out

    def edited_pairs(self) -> dict:
        return dict(self._overlay)

    def copy(self) -> "EditedGraph":
        return EditedGraph(self.base, self.budget, self.edits, self._overlay)


def as_overlay(g, budget: int = 1) -> EditedGraph:
    return g if isinstance(g, EditedGraph) else EditedGraph(g, budget)


def toggle_edge(g: EditedGraph, u: int, v: int, edge_type: str) -> EditedGraph:
    """Flip the presence of edge ``(u, v)`` of ``edge_type``; costs one unit of budget."""
    if len(g.edits) >= g.budget:
        raise BudgetError(f"budget of {g.budget} edits exhausted")
    g.base._orient(edge_type, u, v)  # schema check before any state change
    out = g.copy()
    kind = out._apply(u, v, edge_type)
    out.edits = g.edits + (Edit(int(u), int(v), edge_type, kind),)
    return out


def edit_count(g: EditedGraph) -> int:
    return len(g.edits)


# -- metapaths -----------------------------------------------------------------

def _step_block(graph, edge_type: str, from_type: str) -> sp.csr_matrix:
    """Block of the (effective) adjacency from ``from_type`` rows to the other end."""
    base = graph.base
    et = base.schema.edge_type(edge_type)
    to_type = et.other_end(from_type)
    edited = bool(graph.edited_pairs())
    key = (edge_type, from_type)
    if not edited and key in base._block_cache:
        return base._block_cache[key]
    a = graph.adjacency(edge_type)
    if from_type != et.src:
        a = a.T.tocsr()
    blk = a[base.node_ids_by_type[from_type]][:, base.node_ids_by_type[to_type]].tocsr()
    if not edited:
        base._block_cache[key] = blk
    return blk


def metapath_adjacency(graph, m: Metapath, start: str | None = None) -> sp.csr_matrix:
    """Boolean reachability along ``m``, as a block matrix.

    Rows index ``node_ids_by_type[start]`` and columns the end type's ids (both
    in ascending id order).  Entries are 0/1; self-reachability is cleared.
    """
    schema = graph.schema
    types = m.node_types(schema, start)
    result = None
    for step, t in zip(m.steps, types[:-1]):
        blk = _step_block(graph, step, t).astype(np.int64)
        result = blk if result is None else (result @ blk)
        result.data[:] = 1
    result = result.tocsr()
    if types[0] == types[-1]:
        result.setdiag(0)
    result.eliminate_zeros()
    result.data = np.ones_like(result.data, dtype=np.int8)
    result.sort_indices()
    return result.astype(np.int8)


def metapath_neighbors(graph, node: int, m: Metapath) -> np.ndarray:
    """Ids reachable from ``node`` along ``m`` in the effective graph (node excluded)."""
    schema = graph.schema
    cur_type = graph.node_type_of[node]
    frontier = np.array([node], dtype=np.int64)
    for step in m.steps:
        nxt = [graph.neighbors(int(x), step) for x in frontier]
        cur_type = schema.edge_type(step).other_end(cur_type)
        frontier = np.unique(np.concatenate(nxt)) if nxt else np.zeros(0, dtype=np.int64)
        if not len(frontier):
            break
    return frontier[frontier != node]


# -- homogeneous view ------------------------------------------------------------

@dataclass
class HomogeneousGraph:
    adjacency: sp.csr_matrix
    node_type_of: tuple
    features: np.ndarray = field(repr=False)

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    def neighbors(self, u: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[u]:a.indptr[u + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def edge_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Undirected edges as (u, v) arrays with u < v."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64)


def _base_pair_keys(base: HeteroGraph) -> np.ndarray:
    """Sorted ``u * n + v`` keys (u < v) of the clean homogeneous graph."""
    if base._homog is None:
        n = base.num_nodes
        keys = []
        for a in base.typed_adjacency.values():
            coo = a.tocoo()
            lo = np.minimum(coo.row, coo.col).astype(np.int64)
            hi = np.maximum(coo.row, coo.col).astype(np.int64)
            keys.append(lo * n + hi)
        base._homog = np.unique(np.concatenate(keys)) if keys else np.zeros(0, dtype=np.int64)
    return base._homog


def _csr_from_keys(keys: np.ndarray, n: int) -> sp.csr_matrix:
    lo, hi = keys // n, keys % n
    rows = np.concatenate([lo, hi])
    cols = np.concatenate([hi, lo])
    m = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    m.sort_indices()
    return m


def homogenize(graph) -> HomogeneousGraph:
    """Collapse edge types: ``Ã[i, j] = 1`` iff any typed edge joins ``i`` and ``j``."""
    base = graph.base
    n = base.num_nodes
    keys = _base_pair_keys(base)
    pairs = graph.edited_pairs()
    if pairs:
        add, drop = [], []
        for a, b in {(min(a, b), max(a, b)) for (_, a, b) in pairs}:
            ta, tb = base.node_type_of[a], base.node_type_of[b]
            joined = any(graph.has_edge(a, b, e.name) for e in base.schema.edge_types
                         if {e.src, e.dst} == {ta, tb})
            (add if joined else drop).append(a * n + b)
        if drop:
            keys = keys[~np.isin(keys, drop)]
        if add:
            keys = np.union1d(keys, add)
    return HomogeneousGraph(_csr_from_keys(keys, n), base.node_type_of, base.features)
