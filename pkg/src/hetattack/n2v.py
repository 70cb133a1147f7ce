"""Node2Vec: biased second-order random walks plus skip-gram with negative sampling."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, EmptySupportError, InputError, ParseError


@dataclass
class WalkConfig:
    p: float = 1.0
    q: float = 1.0
    walk_length: int = 20
    walks_per_node: int = 10
    window: int = 5
    negatives: int = 5
    dim: int = 64
    epochs: int = 1
    lr: float = 0.025
    batch_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.p <= 0 or self.q <= 0:
            raise ConfigError("node2vec p and q must be positive")
        if self.dim < 2:
            raise ConfigError("embedding dimension must be at least 2")
        if self.walk_length < 1 or self.walks_per_node < 1 or self.window < 1:
            raise ConfigError("walk length, walks per node and window must be positive")
        if self.negatives < 0 or self.epochs < 1:
            raise ConfigError("negatives must be >= 0 and epochs >= 1")


@dataclass
class EmbeddingTable:
    matrix: np.ndarray        # row i = node i

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix)):
            raise ConfigError("embedding table contains non-finite values")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self):
        return self.matrix.shape[0]

    def __getitem__(self, node):
        return self.matrix[node]


def transition_weights(prev: int, cur: int, graph, p: float, q: float) -> np.ndarray:
    """Unnormalized weights over ``graph.neighbors(cur)`` for a walk arriving from ``prev``."""
    nbrs = graph.neighbors(cur)
    if len(nbrs) == 0:
        raise EmptySupportError(f"node {cur} has no neighbors")
    prev_nbrs = graph.neighbors(prev)
    w = np.full(len(nbrs), 1.0 / q)
    w[np.isin(nbrs, prev_nbrs)] = 1.0
    w[nbrs == prev] = 1.0 / p
    return w


def generate_walks(graph, config: WalkConfig, rng=None) -> list[list[int]]:
    """``walks_per_node`` walks from every node, rounds in node-id order."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    adj = graph.adjacency
    ptr, idx = adj.indptr, adj.indices
    uniform = config.p == 1.0 and config.q == 1.0
    n = adj.shape[0]
    if uniform:
        return _uniform_walks(ptr, idx, n, config, rng)
    walks = []
    for _ in range(config.walks_per_node):
        for start in range(n):
            walk = [start]
            while len(walk) < config.walk_length:
                cur = walk[-1]
                lo, hi = ptr[cur], ptr[cur + 1]
                if lo == hi:
                    break
                if len(walk) == 1:
                    walk.append(int(idx[lo + int(rng.random() * (hi - lo))]))
                    continue
                w = transition_weights(walk[-2], cur, graph, config.p, config.q)
                c = np.cumsum(w)
                j = min(int(np.searchsorted(c, rng.random() * c[-1], side="right")), len(w) - 1)
                walk.append(int(idx[lo + j]))
            walks.append(walk)
    return walks


def _uniform_walks(ptr, idx, n, config: WalkConfig, rng) -> list[list[int]]:
    """First-order walks, all walks of one round advanced together."""
    deg = np.diff(ptr)
    walks = []
    for _ in range(config.walks_per_node):
        cur = np.arange(n)
        steps = [cur]
        alive = deg[cur] > 0
        for _ in range(config.walk_length - 1):
            r = rng.random(n)
            nxt = np.where(alive, idx[np.minimum(ptr[cur] + (r * deg[cur]).astype(np.int64), len(idx) - 1)]
                           if len(idx) else cur, -1)
            steps.append(nxt)
            cur = np.where(alive, nxt, cur)
        mat = np.stack(steps, axis=1)
        for row in mat:
            walks.append(row[row >= 0].tolist())
    return walks


def _pairs(walks, window: int) -> tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    for w in walks:
        a = np.asarray(w, dtype=np.int64)
        for off in range(1, window + 1):
            if len(a) <= off:
                break
            centers += [a[:-off], a[off:]]
            contexts += [a[off:], a[:-off]]
    if not centers:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def _scatter(rows, values, n):
    return sp.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(n, len(rows))) @ values


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def train_skipgram(walks, config: WalkConfig, num_nodes: int | None = None,
                   losses: list | None = None) -> EmbeddingTable:
    """Mini-batch SGNS with unigram^0.75 negatives; rows of unseen nodes keep their init."""
    if not walks or not any(len(w) for w in walks):
        raise EmptySupportError("no walks to train on")
    n = num_nodes if num_nodes is not None else 1 + max(max(w) for w in walks if w)
    rng = np.random.default_rng(config.seed)
    counts = np.bincount(np.concatenate([np.asarray(w, dtype=np.int64) for w in walks]), minlength=n)
    if counts.sum() == 0:
        raise EmptySupportError("empty vocabulary")
    noise = counts.astype(np.float64) ** 0.75
    noise_cdf = np.cumsum(noise / noise.sum())
    emb = (rng.random((n, config.dim)) - 0.5) / config.dim
    ctx = np.zeros((n, config.dim))
    centers, contexts = _pairs(walks, config.window)
    m = len(centers)
    total_steps = config.epochs * max(1, -(-m // config.batch_size))
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(m)
        epoch_loss = 0.0
        for s in range(0, m, config.batch_size):
            lr = config.lr * max(1e-4, 1.0 - step / total_steps)
            step += 1
            b = order[s:s + config.batch_size]
            c, o = centers[b], contexts[b]
            negs = np.minimum(np.searchsorted(noise_cdf, rng.random((len(b), config.negatives))), n - 1)
            vc = emb[c]
            targets = np.concatenate([o[:, None], negs], axis=1)
            vt = ctx[targets]
            score = np.einsum("bd,bkd->bk", vc, vt)
            label = np.zeros_like(score)
            label[:, 0] = 1.0
            sig = _sigmoid(score)
            epoch_loss -= float(np.sum(np.log(np.where(label > 0, sig, 1.0 - sig) + 1e-12)))
            g = (label - sig) * lr
            grad_c = np.einsum("bk,bkd->bd", g, vt)
            grad_t = g[:, :, None] * vc[:, None, :]
            ctx += _scatter(targets.ravel(), grad_t.reshape(-1, config.dim), n)
            emb += _scatter(c, grad_c, n)
        if losses is not None:
            losses.append(epoch_loss / max(m, 1))
    return EmbeddingTable(emb)


def node2vec(graph, config: WalkConfig) -> EmbeddingTable:
    rng = np.random.default_rng(config.seed)
    walks = generate_walks(graph, config, rng)
    return train_skipgram(walks, config, graph.num_nodes)


def save_embeddings(path, table: EmbeddingTable) -> None:
    with open(path, "w") as fh:
        for i, row in enumerate(table.matrix):
            fh.write(f"{i}\t" + "\t".join(format(float(v), ".17g") for v in row) + "\n")


def load_embeddings(path) -> EmbeddingTable:
    rows = {}
    path = Path(path)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                raise ParseError(path, lineno, "expected id and at least two values")
            try:
                rows[int(parts[0])] = [float(v) for v in parts[1:]]
            except ValueError:
                raise ParseError(path, lineno, "non-numeric embedding row") from None
    if sorted(rows) != list(range(len(rows))):
        raise InputError(f"{path}: embedding ids are not contiguous from 0")
    return EmbeddingTable(np.array([rows[i] for i in range(len(rows))]))
