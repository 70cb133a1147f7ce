"""The attacker's two-stage policy: pick an auxiliary type, then a node of that type.

Both stages own a single-layer graph-attention encoder over the homogenized
view of the (edited) graph.  Encoder inputs are the raw node features with a
node-type one-hot and ``log(1 + degree)`` appended.

Parameter names are prefixed ``type.`` (type network) and ``act.`` (action
network) inside one flat dict so the whole policy checkpoints as one file.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import ndiff as nd
from .errors import ConfigError, EmptySupportError, InputError, SchemaError
from .hetgraph import TypeSchema, homogenize

CHOOSE_TYPE = "choose-type"
CHOOSE_NODE = "choose-node"


@dataclass(frozen=True)
class AttackState:
    graph: object            # EditedGraph; immutable, so holding it is a snapshot
    victim: int
    phase: str = CHOOSE_TYPE
    pending_type: str | None = None

    def __post_init__(self):
        if self.phase not in (CHOOSE_TYPE, CHOOSE_NODE):
            raise InputError(f"unknown phase {self.phase!r}")
        if (self.phase == CHOOSE_NODE) != (self.pending_type is not None):
            raise InputError("pending type must be set exactly in the choose-node phase")
        if self.graph.node_type_of[self.victim] != self.graph.schema.primary_type:
            raise SchemaError(f"victim {self.victim} is not of the primary type")


@dataclass(frozen=True)
class AttackAction:
    aux_type: str | None = None
    aux_node: int | None = None

    def __post_init__(self):
        if (self.aux_type is None) == (self.aux_node is None):
            raise InputError("an action is either an auxiliary type or an auxiliary node")


@dataclass
class PolicyConfig:
    hidden: int = 32
    mlp_hidden: int = 32
    init_scale: float = 1.0
    zero_output: bool = True   # zero output layers start the policy uniform
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.mlp_hidden < 1:
            raise ConfigError("policy hidden sizes must be positive")


def input_dim(schema: TypeSchema, n_features: int) -> int:
    return n_features + len(schema.node_types) + 1


def _glorot(rng, shape, scale):
    lim = scale * math.sqrt(6.0 / (shape[0] + (shape[1] if len(shape) > 1 else 1)))
    return rng.uniform(-lim, lim, size=shape)


def _encoder_params(prefix, f_in, d, rng, scale):
    return {f"{prefix}W": _glorot(rng, (f_in, d), scale),
            f"{prefix}a_src": _glorot(rng, (d, 1), scale)[:, 0],
            f"{prefix}a_dst": _glorot(rng, (d, 1), scale)[:, 0]}


def init_policy_params(schema: TypeSchema, n_features: int, config: PolicyConfig) -> dict[str, np.ndarray]:
    n_aux = len(schema.auxiliary_types)
    if n_aux == 0:
        raise SchemaError("schema has no auxiliary types")
    rng = np.random.default_rng(config.seed)
    f_in, d, m, s = input_dim(schema, n_features), config.hidden, config.mlp_hidden, config.init_scale
    p = {}
    p.update(_encoder_params("type.", f_in, d, rng, s))
    p["type.Wq"] = _glorot(rng, (2 * d, d), s)
    p["type.bq"] = np.zeros(d)
    p["type.W_out"] = np.zeros((d, n_aux)) if config.zero_output else _glorot(rng, (d, n_aux), s)
    p["type.b_out"] = np.zeros(n_aux)
    p.update(_encoder_params("act.", f_in, d, rng, s))
    p["act.W1"] = _glorot(rng, (3 * d, m), s)
    p["act.b1"] = np.zeros(m)
    p["act.W2"] = np.zeros(m) if config.zero_output else _glorot(rng, (m, 1), s)[:, 0]
    p["act.b2"] = np.zeros(())
    return p


# -- encoder --------------------------------------------------------------------------------

@dataclass
class EncoderInput:
    """Graph-derived, parameter-free encoder inputs for one graph state."""
    x: np.ndarray          # (N, f_in)
    src: np.ndarray        # CSR column indices, self-loops included
    ptr: np.ndarray
    dst: np.ndarray


def encoder_input(graph) -> EncoderInput:
    h = homogenize(graph)
    n = h.num_nodes
    a = (h.adjacency + sp.identity(n, dtype=h.adjacency.dtype, format="csr")).tocsr()
    a.sort_indices()
    schema = graph.schema
    tix = {t: i for i, t in enumerate(schema.node_types)}
    onehot = np.zeros((n, len(tix)))
    onehot[np.arange(n), [tix[t] for t in graph.node_type_of]] = 1.0
    deg = np.log1p(h.degree().astype(np.float64))[:, None]
    x = np.hstack([graph.features, onehot, deg])
    ptr = a.indptr.astype(np.int64)
    return EncoderInput(x, a.indices.astype(np.int64), ptr, np.repeat(np.arange(n), np.diff(ptr)))


def encode(params: dict, prefix: str, enc: EncoderInput) -> tuple[nd.Tensor, nd.Tensor]:
    """(node embeddings (N, d), graph embedding = mean of node embeddings)."""
    h = nd.affine(enc.x, params[f"{prefix}W"])
    s_src = nd.matmul(h, params[f"{prefix}a_src"])
    s_dst = nd.matmul(h, params[f"{prefix}a_dst"])
    e = nd.leaky_relu(nd.add(nd.take(s_dst, enc.dst), nd.take(s_src, enc.src)))
    alpha = nd.segment_softmax(e, enc.ptr)
    z = nd.elu(nd.edge_aggregate(alpha, h, enc.src, enc.ptr))
    return z, nd.mean(z, axis=0)


# -- the two networks -------------------------------------------------------------------------

def typenet_forward(params: dict, state: AttackState, enc: EncoderInput | None = None) -> nd.Tensor:
    """Distribution over the schema's auxiliary types (in declaration order)."""
    if state.phase != CHOOSE_TYPE:
        raise InputError("type network called outside the choose-type phase")
    if not state.graph.schema.auxiliary_types:
        raise SchemaError("schema has no auxiliary types")
    enc = enc or encoder_input(state.graph)
    z, h_graph = encode(params, "type.", enc)
    h_target = nd.take(z, state.victim)
    q = nd.affine(nd.concat([h_target, h_graph]), params["type.Wq"], params["type.bq"])
    d = z.shape[1]
    ctx = nd.attention(q, z, z, d)
    return nd.softmax(nd.affine(ctx, params["type.W_out"], params["type.b_out"]))


def candidates(graph, aux_type: str) -> np.ndarray:
    if aux_type not in graph.schema.auxiliary_types:
        raise SchemaError(f"{aux_type!r} is not an auxiliary type")
    return graph.node_ids_by_type[aux_type]


def actionnet_forward(params: dict, state: AttackState, aux_type: str | None = None,
                      enc: EncoderInput | None = None) -> nd.Tensor:
    """Distribution over ``candidates(graph, aux_type)`` (ascending node id)."""
    aux_type = aux_type or state.pending_type
    if state.phase != CHOOSE_NODE:
        raise InputError("action network called outside the choose-node phase")
    cand = candidates(state.graph, aux_type)
    if len(cand) == 0:
        raise EmptySupportError(f"auxiliary type {aux_type!r} has no nodes")
    enc = enc or encoder_input(state.graph)
    z, h_graph = encode(params, "act.", enc)
    d = z.shape[1]
    h_target = nd.take(z, state.victim)
    w1 = params["act.W1"]
    shared = nd.affine(nd.concat([h_target, h_graph]), nd.take(w1, slice(0, 2 * d)), params["act.b1"])
    hidden = nd.relu(nd.add(nd.matmul(nd.take(z, cand), nd.take(w1, slice(2 * d, 3 * d))), shared))
    scores = nd.add(nd.matmul(hidden, params["act.W2"]), params["act.b2"])
    mask = cand != state.victim
    return nd.masked_softmax(scores, mask)


def _draw(probs: np.ndarray, rng) -> int:
    """Inverse-CDF draw; never returns a zero-probability index."""
    c = np.cumsum(probs)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    i = min(i, len(probs) - 1)
    while probs[i] <= 0.0:
        i -= 1
    return i


@dataclass
class HierarchicalPolicy:
    """Bundles parameters with the schema needed to interpret them."""
    params: dict
    schema: TypeSchema
    config: PolicyConfig = field(default_factory=PolicyConfig)
    _enc: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @classmethod
    def create(cls, schema: TypeSchema, n_features: int, config: PolicyConfig | None = None):
        config = config or PolicyConfig()
        return cls(init_policy_params(schema, n_features, config), schema, config)

    def with_params(self, params: dict) -> "HierarchicalPolicy":
        return replace(self, params=params)

    def encoder_input(self, graph) -> EncoderInput:
        """Encoder inputs of ``graph``, cached for the most recent graph object."""
        if self._enc is None or self._enc[0] is not graph:
            self._enc = (graph, encoder_input(graph))
        return self._enc[1]

    def distribution(self, params: dict, state: AttackState, enc: EncoderInput | None = None):
        """(items, probability Tensor) for the state's phase."""
        enc = enc or self.encoder_input(state.graph)
        if state.phase == CHOOSE_TYPE:
            return list(self.schema.auxiliary_types), typenet_forward(params, state, enc)
        cand = candidates(state.graph, state.pending_type)
        return cand.tolist(), actionnet_forward(params, state, state.pending_type, enc)

    def sample(self, state: AttackState, rng) -> tuple[AttackAction, float]:
        items, probs = self.distribution(self.params, state)
        p = probs.data
        i = _draw(p, rng)
        if state.phase == CHOOSE_TYPE:
            return AttackAction(aux_type=items[i]), math.log(p[i])
        return AttackAction(aux_node=int(items[i])), math.log(p[i])

    def log_prob(self, params: dict, state: AttackState, action: AttackAction) -> nd.Tensor:
        items, probs = self.distribution(params, state)
        if state.phase == CHOOSE_TYPE:
            if action.aux_type is None:
                raise InputError("choose-type phase needs a type action")
            idx = items.index(action.aux_type)
        else:
            if action.aux_node is None:
                raise InputError("choose-node phase needs a node action")
            pos = int(np.searchsorted(np.asarray(items), action.aux_node))
            if pos >= len(items) or items[pos] != action.aux_node:
                raise SchemaError(f"node {action.aux_node} is not of type {state.pending_type!r}")
            idx = pos
        return nd.log(nd.take(probs, idx))


def sample_action(policy, state: AttackState, rng) -> tuple[AttackAction, float]:
    """Sample from the current phase's network; returns the action and its log-probability."""
    return policy.sample(state, rng)


def full_action_log_prob(policy: HierarchicalPolicy, state: AttackState, aux_type: str, node: int) -> float:
    """log p(type | s) + log p(node | s, type) for a complete edit."""
    lt = float(policy.log_prob(policy.params, state, AttackAction(aux_type=aux_type)).data)
    node_state = replace(state, phase=CHOOSE_NODE, pending_type=aux_type)
    ln = float(policy.log_prob(policy.params, node_state, AttackAction(aux_node=node)).data)
    return lt + ln


def save_policy(path, policy: HierarchicalPolicy) -> None:
    nd.save_params(path, policy.params)


def load_policy(path, schema: TypeSchema, config: PolicyConfig | None = None) -> HierarchicalPolicy:
    return HierarchicalPolicy(nd.load_params(path), schema, config or PolicyConfig())
