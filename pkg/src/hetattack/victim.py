"""HAN-style victim classifier and the black-box oracle the attacker talks to.

One node-level attention layer per metapath (single head, self-loop always
included) followed by per-node semantic attention across metapaths and an
affine softmax head.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndiff as nd
from .errors import ConfigError, SchemaError
from .hetgraph import HeteroGraph, Metapath, metapath_adjacency, metapath_neighbors

log = logging.getLogger(__name__)


@dataclass
class VictimHyperParams:
    hidden: int = 64
    semantic_hidden: int = 32
    lr: float = 0.005
    weight_decay: float = 0.001
    max_epochs: int = 300
    patience: int = 20


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ConfigError("train/val/test splits overlap")


def stratified_split(graph: HeteroGraph, seed: int, fractions=(0.6, 0.2, 0.2)) -> Split:
    rng = np.random.default_rng(seed)
    ids = graph.primary_ids
    labels = graph.labels[ids]
    parts = ([], [], [])
    for c in np.unique(labels):
        members = rng.permutation(ids[labels == c])
        n_tr = int(round(fractions[0] * len(members)))
        n_va = int(round(fractions[1] * len(members)))
        parts[0].extend(members[:n_tr])
        parts[1].extend(members[n_tr:n_tr + n_va])
        parts[2].extend(members[n_tr + n_va:])
    return Split(*(np.sort(np.array(p, dtype=np.int64)) for p in parts))


def _glorot(rng, shape):
    lim = math.sqrt(6.0 / (shape[0] + (shape[1] if len(shape) > 1 else 1)))
    return rng.uniform(-lim, lim, size=shape)


def init_params(n_features: int, n_classes: int, n_metapaths: int, hidden: int,
                semantic_hidden: int, rng) -> dict[str, np.ndarray]:
    p = {}
    for k in range(n_metapaths):
        p[f"W_{k}"] = _glorot(rng, (n_features, hidden))
        p[f"a_src_{k}"] = _glorot(rng, (hidden, 1))[:, 0]
        p[f"a_dst_{k}"] = _glorot(rng, (hidden, 1))[:, 0]
    p["sem_W"] = _glorot(rng, (hidden, semantic_hidden))
    p["sem_b"] = np.zeros(semantic_hidden)
    p["sem_q"] = _glorot(rng, (semantic_hidden, 1))[:, 0]
    p["out_W"] = _glorot(rng, (hidden, n_classes))
    p["out_b"] = np.zeros(n_classes)
    return p


@dataclass
class VictimModel:
    params: dict[str, np.ndarray]
    metapaths: tuple[Metapath, ...]
    primary_type: str
    frozen: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def hidden(self) -> int:
        return self.params["W_0"].shape[1]

    @property
    def n_classes(self) -> int:
        return self.params["out_b"].shape[0]

    def freeze(self) -> "VictimModel":
        self.params = {k: np.array(v, copy=True) for k, v in self.params.items()}
        for v in self.params.values():
            v.setflags(write=False)
        self.frozen = True
        self._cache.clear()
        return self

    def check_graph(self, graph) -> None:
        if graph.schema.primary_type != self.primary_type:
            raise SchemaError("victim model was trained for a different primary type")
        for m in self.metapaths:
            m.validate(graph.schema)
        if graph.features.shape[1] != self.params["W_0"].shape[0]:
            raise SchemaError("feature dimension does not match the victim model")

    def _projections(self, base: HeteroGraph):
        """Per-metapath projected features of all primary nodes (features never change)."""
        key = id(base)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is base:
            return hit[1]
        ids = base.primary_ids
        x = base.features[ids]
        proj = []
        for k in range(len(self.metapaths)):
            h = x @ self.params[f"W_{k}"]
            proj.append((h, h @ self.params[f"a_src_{k}"], h @ self.params[f"a_dst_{k}"]))
        self._cache[key] = (base, proj)
        return proj


# -- batched forward (taped, used for training) ---------------------------------------

def _metapath_segments(graph, metapaths):
    """For each metapath: (src row idx, CSR ptr) over primary nodes, self-loops included."""
    out = []
    n = len(graph.node_ids_by_type[graph.schema.primary_type])
    for m in metapaths:
        a = metapath_adjacency(graph, m).tolil()
        a.setdiag(1)
        a = a.tocsr()
        a.sort_indices()
        out.append((a.indices.astype(np.int64), a.indptr.astype(np.int64)))
        assert a.shape == (n, n)
    return out


def batched_logits(params: dict, x: np.ndarray, segments, n_classes: int | None = None) -> nd.Tensor:
    """Class logits for every primary node; ``params`` may be tape tensors."""
    n = x.shape[0]
    zs, ws = [], []
    for k, (src, ptr) in enumerate(segments):
        h = nd.affine(x, params[f"W_{k}"])
        s_src = nd.matmul(h, params[f"a_src_{k}"])
        s_dst = nd.matmul(h, params[f"a_dst_{k}"])
        dst = np.repeat(np.arange(n), np.diff(ptr))
        e = nd.leaky_relu(nd.add(nd.take(s_dst, dst), nd.take(s_src, src)))
        alpha = nd.segment_softmax(e, ptr)
        z = nd.elu(nd.edge_aggregate(alpha, h, src, ptr))
        w = nd.matmul(nd.tanh(nd.affine(z, params["sem_W"], params["sem_b"])), params["sem_q"])
        zs.append(z)
        ws.append(nd.reshape(w, (n, 1)))
    beta = nd.softmax(nd.concat(ws, axis=1))
    combined = None
    for k, z in enumerate(zs):
        onehot = np.zeros(len(zs))
        onehot[k] = 1.0
        bk = nd.reshape(nd.matmul(beta, onehot), (n, 1))
        term = nd.mul(bk, z)
        combined = term if combined is None else nd.add(combined, term)
    return nd.affine(combined, params["out_W"], params["out_b"])


# -- per-node forward (inference / oracle) -----------------------------------------------

def _node_forward(model: VictimModel, graph, node: int, proj, pos_of) -> tuple[np.ndarray, np.ndarray]:
    """(class distribution, semantic weights) for one primary node in ``graph``."""
    p = model.params
    me = pos_of(node)
    zs, ws = [], []
    for k, m in enumerate(model.metapaths):
        h, s_src, s_dst = proj[k]
        nb = metapath_neighbors(graph, node, m)
        idx = np.sort(np.concatenate([pos_of(nb), [me]])) if len(nb) else np.array([me])
        e = s_dst[me] + s_src[idx]
        e = np.where(e > 0, e, 0.2 * e)
        a = np.exp(e - e.max())
        a /= a.sum()
        agg = a @ h[idx]
        z = np.where(agg > 0, agg, np.expm1(np.minimum(agg, 0.0)))
        zs.append(z)
        ws.append(np.tanh(z @ p["sem_W"] + p["sem_b"]) @ p["sem_q"])
    ws = np.array(ws)
    beta = np.exp(ws - ws.max())
    beta /= beta.sum()
    combined = sum(b * z for b, z in zip(beta, zs))
    logits = combined @ p["out_W"] + p["out_b"]
    pr = np.exp(logits - logits.max())
    return pr / pr.sum(), beta


def _positions(base: HeteroGraph):
    ids = base.primary_ids

    def pos_of(x):
        return np.searchsorted(ids, x)
    return pos_of


def forward(model: VictimModel, graph, nodes=None) -> np.ndarray:
    """Class distributions (rows) for ``nodes`` (default: all primary nodes)."""
    model.check_graph(graph)
    base = graph.base
    if nodes is None:
        nodes = base.primary_ids
    proj = model._projections(base)
    pos_of = _positions(base)
    out = []
    for v in np.asarray(nodes).tolist():
        if base.node_type_of[v] != model.primary_type:
            raise SchemaError(f"node {v} is not of the primary type")
        out.append(_node_forward(model, graph, v, proj, pos_of)[0])
    return np.array(out).reshape(len(out), model.n_classes)


def semantic_weights(model: VictimModel, graph, node: int) -> np.ndarray:
    base = graph.base
    return _node_forward(model, graph, node, model._projections(base), _positions(base))[1]


def accuracy(model: VictimModel, graph, nodes) -> float:
    pred = forward(model, graph, nodes).argmax(axis=1)
    return float(np.mean(pred == graph.labels[np.asarray(nodes)]))


# -- training ----------------------------------------------------------------------------------

def train_victim(graph: HeteroGraph, split: Split, metapaths, hyper: VictimHyperParams | None = None,
                 seed: int = 0, history: list | None = None) -> VictimModel:
    """Full-batch Adam on cross-entropy over the train split, early-stopped on val accuracy."""
    hyper = hyper or VictimHyperParams()
    if len(split.train) == 0:
        raise ConfigError("empty training split")
    metapaths = tuple(metapaths)
    for m in metapaths:
        m.validate(graph.schema)
    rng = np.random.default_rng(seed)
    ids = graph.primary_ids
    pos_of = _positions(graph)
    x = graph.features[ids]
    segments = _metapath_segments(graph, metapaths)
    n_classes = graph.num_classes
    params = init_params(x.shape[1], n_classes, len(metapaths), hyper.hidden, hyper.semantic_hidden, rng)
    opt = nd.Adam(lr=hyper.lr, weight_decay=hyper.weight_decay)
    tr, va = pos_of(split.train), pos_of(split.val)
    y = graph.labels[ids]
    best = (-1.0, math.inf, params)
    stale = 0
    for epoch in range(hyper.max_epochs):
        tape = nd.Tape()
        logits = batched_logits(tape.watch(params), x, segments)
        loss = nd.cross_entropy(nd.take(logits, tr), y[tr])
        grads = nd.backward(tape, loss)
        pred = logits.data.argmax(axis=1)
        val_acc = float(np.mean(pred[va] == y[va])) if len(va) else 0.0
        val_loss = float(nd.cross_entropy(logits.data[va], y[va]).data) if len(va) else 0.0
        if history is not None:
            history.append({"epoch": epoch, "train_loss": float(loss.data),
                            "train_acc": float(np.mean(pred[tr] == y[tr])), "val_acc": val_acc})
        if val_acc > best[0] or (val_acc == best[0] and val_loss < best[1]):
            best = (val_acc, val_loss, params)
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                break
        params = opt.step(params, grads)
    log.info("victim trained: best val acc %.3f", best[0])
    return VictimModel(best[2], metapaths, graph.schema.primary_type).freeze()


def save_victim(path, model: VictimModel) -> None:
    nd.save_params(path, model.params)


def load_victim(path, metapaths, primary_type: str) -> VictimModel:
    return VictimModel(nd.load_params(path), tuple(metapaths), primary_type).freeze()


# -- black-box boundary -------------------------------------------------------------------------

@dataclass(frozen=True)
class QueryResult:
    label: int
    distribution: np.ndarray
    nll: float


class BlackBoxOracle:
    """Input/output access to a frozen classifier.

    The only public surface is :meth:`query` and :attr:`query_count`; no
    parameters or gradients are reachable through it.
    """

    __slots__ = ("_BlackBoxOracle__predict", "_BlackBoxOracle__count")

    def __init__(self, model: VictimModel):
        if not model.frozen:
            raise ConfigError("oracle requires a frozen victim model")

        def predict(graph, node):
            model.check_graph(graph)
            base = graph.base
            return _node_forward(model, graph, node, model._projections(base), _positions(base))[0]

        self.__predict = predict
        self.__count = 0

    @property
    def query_count(self) -> int:
        return self.__count

    def query(self, graph, victim: int, true_label: int) -> QueryResult:
        if graph.node_type_of[victim] != graph.schema.primary_type:
            raise SchemaError(f"victim {victim} is not of the primary type")
        dist = self.__predict(graph, int(victim))
        self.__count += 1
        return QueryResult(int(np.argmax(dist)), dist, float(nd.nll(dist, int(true_label)).data))
