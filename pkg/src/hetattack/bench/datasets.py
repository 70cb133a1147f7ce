"""Dataset I/O in the directory format and the synthetic block-model generator.

Directory layout::

    schema.yaml   node_types, edge_types [[name, src, dst], ...], primary_type,
                  metapaths {name: [step, ...]}, optional num_classes
    nodes.tsv     id <TAB> type
    edges.tsv     src <TAB> dst <TAB> edge_type
    features.tsv  id <TAB> v1,v2,...,vf
    labels.tsv    id <TAB> class

Lines starting with ``#`` are ignored.  Ids are contiguous integers from 0.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..errors import ConfigError, DatasetReferenceError, ParseError, SchemaError
from ..hetgraph import EdgeType, HeteroGraph, Metapath, TypeSchema, build_graph

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    graph: HeteroGraph
    metapaths: tuple[Metapath, ...]
    name: str = "dataset"

    @property
    def num_classes(self) -> int:
        return self.graph.num_classes


def _rows(path: Path, ncols: int):
    if not path.exists():
        raise DatasetReferenceError(f"missing dataset file {path}")
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != ncols:
                raise ParseError(path, lineno, f"expected {ncols} tab-separated fields, got {len(parts)}")
            yield lineno, parts


def _int(path, lineno, s):
    try:
        return int(s)
    except ValueError:
        raise ParseError(path, lineno, f"not an integer: {s!r}") from None


def load_dataset(path) -> Dataset:
    root = Path(path)
    schema_path = root / "schema.yaml"
    if not schema_path.exists():
        raise DatasetReferenceError(f"missing dataset file {schema_path}")
    with open(schema_path) as fh:
        meta = yaml.safe_load(fh)
    try:
        schema = TypeSchema(tuple(meta["node_types"]), tuple(EdgeType(*e) for e in meta["edge_types"]),
                            meta["primary_type"])
        metapaths = tuple(Metapath(tuple(steps), name) for name, steps in meta["metapaths"].items())
    except (KeyError, TypeError) as exc:
        raise ParseError(schema_path, 0, f"bad schema: {exc}") from exc
    for m in metapaths:
        m.validate(schema)

    nodes = []
    for lineno, (i, t) in _rows(root / "nodes.tsv", 2):
        nodes.append((_int(root / "nodes.tsv", lineno, i), t))
    n = len(nodes)
    known = {i for i, _ in nodes}

    edges = []
    for lineno, (u, v, r) in _rows(root / "edges.tsv", 3):
        u, v = _int(root / "edges.tsv", lineno, u), _int(root / "edges.tsv", lineno, v)
        if u not in known or v not in known:
            raise DatasetReferenceError(f"{root / 'edges.tsv'}:{lineno}: dangling node id")
        edges.append((u, v, r))

    feats = None
    seen = set()
    for lineno, (i, vals) in _rows(root / "features.tsv", 2):
        i = _int(root / "features.tsv", lineno, i)
        if i not in known:
            raise DatasetReferenceError(f"{root / 'features.tsv'}:{lineno}: dangling node id {i}")
        try:
            row = np.array([float(v) for v in vals.split(",")])
        except ValueError:
            raise ParseError(root / "features.tsv", lineno, "non-numeric feature value") from None
        if feats is None:
            feats = np.zeros((n, len(row)))
        if len(row) != feats.shape[1]:
            raise ParseError(root / "features.tsv", lineno, "inconsistent feature dimension")
        feats[i] = row
        seen.add(i)
    if feats is None or len(seen) != n:
        raise DatasetReferenceError(f"{root / 'features.tsv'}: features missing for some nodes")

    labels = {}
    for lineno, (i, c) in _rows(root / "labels.tsv", 2):
        i = _int(root / "labels.tsv", lineno, i)
        if i not in known:
            raise DatasetReferenceError(f"{root / 'labels.tsv'}:{lineno}: dangling node id {i}")
        labels[i] = _int(root / "labels.tsv", lineno, c)

    graph = build_graph(schema, nodes, edges, feats, labels)
    ds = Dataset(graph, metapaths, meta.get("name", root.name))
    log.info("loaded %s: %s", ds.name, graph.summary())
    return ds


def save_dataset(ds: Dataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    g = ds.graph
    meta = g.schema.to_dict()
    meta["metapaths"] = {m.name: list(m.steps) for m in ds.metapaths}
    meta["name"] = ds.name
    with open(root / "schema.yaml", "w") as fh:
        yaml.safe_dump(meta, fh, sort_keys=False)
    with open(root / "nodes.tsv", "w") as fh:
        for i, t in enumerate(g.node_type_of):
            fh.write(f"{i}\t{t}\n")
    with open(root / "edges.tsv", "w") as fh:
        for e in g.schema.edge_types:
            coo = g.typed_adjacency[e.name].tocoo()
            for a, b in sorted(zip(coo.row.tolist(), coo.col.tolist())):
                if e.src == e.dst and a > b:
                    continue
                fh.write(f"{a}\t{b}\t{e.name}\n")
    with open(root / "features.tsv", "w") as fh:
        for i, row in enumerate(g.features):
            fh.write(f"{i}\t" + ",".join(format(float(v), ".17g") for v in row) + "\n")
    with open(root / "labels.tsv", "w") as fh:
        for i in g.primary_ids.tolist():
            fh.write(f"{i}\t{int(g.labels[i])}\n")


# -- synthetic generator -------------------------------------------------------------------

@dataclass
class AuxSpec:
    count: int
    links: float = 1.0        # mean links per primary node (at least one)
    popularity: float = 0.0   # Zipf exponent of aux-node popularity inside a class block
    homophily: float | None = None   # overrides the global homophily for this type
    min_degree: int = 0       # aux nodes below this get extra links to random primary nodes


@dataclass
class SynthSpec:
    """Stochastic-block heterograph: same-class primary nodes share auxiliary neighbours."""

    n_classes: int = 3
    n_primary: int = 600
    primary_type: str = "Paper"
    aux: dict = field(default_factory=lambda: {"Author": AuxSpec(300, 2.0), "Field": AuxSpec(60, 1.0)})
    homophily: float = 0.9
    feature_dim: int = 16
    feature_signal: float = 1.0
    feature_noise: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "aux" in d:
            d["aux"] = {k: v if isinstance(v, AuxSpec) else AuxSpec(**v) if isinstance(v, dict) else AuxSpec(int(v))
                        for k, v in d["aux"].items()}
        return cls(**d)


def _short(name: str) -> str:
    return name[0].lower()


def _top_up(rng, edges, ename, offset, home, labels, min_degree, hom):
    """Extra links so every aux node of this type has at least ``min_degree`` primary neighbours."""
    C = int(labels.max()) + 1
    linked = {}
    for i, j, r in edges:
        if r == ename:
            linked.setdefault(j - offset, set()).add(i)
    by_class = [np.flatnonzero(labels == c) for c in range(C)]
    other = [np.flatnonzero(labels != c) for c in range(C)]
    extra = []
    for j in range(len(home)):
        have = linked.get(j, set())
        while len(have) < min(min_degree, len(labels)):
            pool = by_class[home[j]] if (C == 1 or rng.random() < hom) else other[home[j]]
            i = int(pool[rng.integers(len(pool))])
            if i not in have:
                have.add(i)
                extra.append((i, int(offset + j), ename))
    return extra


def synth_dataset(spec: SynthSpec, seed: int = 0) -> Dataset:
    if spec.n_classes < 1:
        raise ConfigError("synthetic spec needs at least one class")
    if spec.n_primary < spec.n_classes:
        raise ConfigError("need at least one primary node per class")
    if not spec.aux:
        raise ConfigError("synthetic spec needs at least one auxiliary type")
    for h in [spec.homophily] + [a.homophily for a in spec.aux.values() if a.homophily is not None]:
        if not 0.0 <= h <= 1.0:
            raise ConfigError("homophily must lie in [0, 1]")
    shorts = [_short(spec.primary_type)] + [_short(t) for t in spec.aux]
    if len(set(shorts)) != len(shorts):
        raise ConfigError("node type names must have distinct initials")
    rng = np.random.default_rng(seed)
    p = _short(spec.primary_type)
    node_types = (spec.primary_type,) + tuple(spec.aux)
    edge_types = tuple(EdgeType(p + _short(t), spec.primary_type, t) for t in spec.aux)
    schema = TypeSchema(node_types, edge_types, spec.primary_type)
    metapaths = tuple(Metapath((e.name, e.name), p + _short(e.dst) + p) for e in edge_types)

    C = spec.n_classes
    labels = np.arange(spec.n_primary) % C
    rng.shuffle(labels)
    nodes = [(i, spec.primary_type) for i in range(spec.n_primary)]
    home = [labels]
    offset = spec.n_primary
    edges = []
    for t, a in spec.aux.items():
        if a.count < C:
            raise ConfigError(f"auxiliary type {t!r} needs at least {C} nodes")
        ids = np.arange(offset, offset + a.count)
        nodes += [(int(i), t) for i in ids]
        h = np.arange(a.count) % C
        rng.shuffle(h)
        home.append(h)
        weight = np.empty(a.count)
        for c in range(C):
            members = np.flatnonzero(h == c)
            ranks = rng.permutation(len(members))
            weight[members] = (ranks + 1.0) ** (-a.popularity)
        pools = [np.flatnonzero(h == c) for c in range(C)]
        others = [np.flatnonzero(h != c) for c in range(C)]
        ename = p + _short(t)
        hom = spec.homophily if a.homophily is None else a.homophily
        for i in range(spec.n_primary):
            k = min(a.count, 1 + rng.poisson(max(a.links - 1.0, 0.0)))
            chosen = set()
            for _ in range(k):
                pool = pools[labels[i]] if (C == 1 or rng.random() < hom) else others[labels[i]]
                w = weight[pool].copy()
                w[[j for j, x in enumerate(pool) if x in chosen]] = 0.0
                if w.sum() <= 0:
                    continue
                pick = int(pool[rng.choice(len(pool), p=w / w.sum())])
                chosen.add(pick)
            edges += [(i, int(offset + j), ename) for j in sorted(chosen)]
        if a.min_degree > 0:
            edges += _top_up(rng, edges, ename, offset, h, labels, a.min_degree, hom)
        offset += a.count

    means = rng.normal(size=(C, spec.feature_dim))
    means *= spec.feature_signal / np.linalg.norm(means, axis=1, keepdims=True)
    all_home = np.concatenate(home)
    feats = means[all_home] + spec.feature_noise * rng.normal(size=(len(nodes), spec.feature_dim)) \
        / np.sqrt(spec.feature_dim)
    graph = build_graph(schema, nodes, edges, feats, {i: int(labels[i]) for i in range(spec.n_primary)})
    return Dataset(graph, metapaths, f"synth-{seed}")
