"""A small reverse-mode differentiation tape over float64 numpy arrays.

Usage::

    tape = Tape()
    p = tape.watch(params)               # dict name -> Tensor
    loss = nll(softmax(affine(x, p["W"], p["b"])), 2)
    grads = backward(tape, loss)         # dict name -> ndarray

Operations also accept plain arrays or tape-less tensors, in which case they
run forward only and record nothing.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import EmptySupportError, InputError, NonFiniteError

PROB_CLAMP = 1e-12


class Tensor:
    __slots__ = ("data", "tape", "uid", "name")

    def __init__(self, data, tape: "Tape | None" = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.name = name
        self.uid = tape._next_uid() if tape is not None else -1

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


class _Op:
    __slots__ = ("name", "out", "inputs", "backward")

    def __init__(self, name, out, inputs, backward):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    def __init__(self):
        self.ops: list[_Op] = []
        self.params: dict[str, Tensor] = {}
        self._uid = 0

    def _next_uid(self) -> int:
        self._uid += 1
        return self._uid

    def watch(self, params: dict[str, np.ndarray]) -> dict[str, Tensor]:
        """Register parameter arrays as differentiable leaves."""
        out = {}
        for name, arr in params.items():
            t = Tensor(np.array(arr, dtype=np.float64), self, name)
            self.params[name] = t
            out[name] = t
        return out

    def __len__(self):
        return len(self.ops)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            return x.tape
    return None


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


def _result(name: str, data: np.ndarray, inputs: Sequence, backward: Callable) -> Tensor:
    """Wrap ``data``; record the op when any input lives on a tape.

    ``backward(g)`` returns one gradient (or None) per input.
    """
    _finite(data, name)
    tape = _tape(*inputs)
    out = Tensor(data, tape)
    if tape is not None:
        tape.ops.append(_Op(name, out, tuple(inputs), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result("leaky_relu", np.where(mask, x.data, slope * x.data), (x,),
                   lambda g: (np.where(mask, g, slope * g),))


def elu(x) -> Tensor:
    x = as_tensor(x)
    neg = np.expm1(np.minimum(x.data, 0.0))
    mask = x.data > 0
    return _result("elu", np.where(mask, x.data, neg), (x,),
                   lambda g: (np.where(mask, g, g * (neg + 1.0)),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result("log", np.log(xd), (x,), lambda g: (g / xd,))


# -- linear algebra -----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.shape[-1] != bd.shape[0]:
        raise InputError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def back(g):
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _result("matmul", ad @ bd, (a, b), back)


def affine(x, W, b=None) -> Tensor:
    """``x @ W + b`` for a vector or a row-batch ``x``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise InputError(f"affine shape mismatch: x{x.shape} W{W.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd
    if b is None:
        return _result("affine", out, (x, W),
                       lambda g: ((g @ Wd.T), (np.outer(xd, g) if xd.ndim == 1 else xd.T @ g)))
    b = as_tensor(b)
    if b.shape != (Wd.shape[1],):
        raise InputError(f"affine bias shape {b.shape} != ({Wd.shape[1]},)")

    def back(g):
        gW = np.outer(xd, g) if xd.ndim == 1 else xd.T @ g
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return g @ Wd.T, gW, gb

    return _result("affine", out + b.data, (x, W, b), back)


# -- reductions / reshaping -----------------------------------------------------------

def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result("sum", np.asarray(x.data.sum(axis=axis)), (x,), back)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]

    def back(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _result("mean", np.asarray(x.data.mean(axis=axis)), (x,), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _result("concat", np.concatenate([x.data for x in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x, idx) -> Tensor:
    """Row gather ``x[idx]`` (integer, slice or index array along axis 0)."""
    x = as_tensor(x)
    shape = x.shape
    if isinstance(idx, (int, np.integer)):
        def back(g):
            out = np.zeros(shape)
            out[idx] = g
            return (out,)
        return _result("take", np.array(x.data[idx]), (x,), back)
    if isinstance(idx, slice):
        def back(g):
            out = np.zeros(shape)
            out[idx] = g
            return (out,)
        return _result("take", x.data[idx].copy(), (x,), back)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        return (scatter_rows(g, idx, shape[0]),)

    return _result("take", x.data[idx], (x,), back)


def scatter_rows(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[i]] += values[i]`` via a sparse product (much faster than ``np.add.at``)."""
    m = len(idx)
    s = sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n, m))
    if values.ndim == 1:
        return s @ values
    return np.asarray(s @ values)


# -- segments (edge lists grouped by destination) ----------------------------------------

def _segments(ptr: np.ndarray):
    ptr = np.asarray(ptr, dtype=np.int64)
    counts = np.diff(ptr)
    if (counts <= 0).any():
        raise EmptySupportError("every segment needs at least one entry")
    return ptr[:-1], counts


def segment_softmax(scores, ptr) -> Tensor:
    """Softmax of a 1-D score vector within contiguous segments ``ptr[i]:ptr[i+1]``."""
    scores = as_tensor(scores)
    starts, counts = _segments(ptr)
    s = scores.data
    mx = np.maximum.reduceat(s, starts)
    e = np.exp(s - np.repeat(mx, counts))
    z = np.add.reduceat(e, starts)
    y = e / np.repeat(z, counts)

    def back(g):
        dot = np.add.reduceat(g * y, starts)
        return (y * (g - np.repeat(dot, counts)),)

    return _result("segment_softmax", y, (scores,), back)


def segment_sum(values, ptr) -> Tensor:
    values = as_tensor(values)
    starts, counts = _segments(ptr)
    return _result("segment_sum", np.add.reduceat(values.data, starts, axis=0), (values,),
                   lambda g: (np.repeat(g, counts, axis=0),))


def edge_aggregate(weights, h, src, ptr) -> Tensor:
    """``out[i] = sum_e weights[e] * h[src[e]]`` over the segment of row ``i``.

    Equivalent to ``segment_sum(reshape(weights, (E, 1)) * take(h, src), ptr)``
    but done as one sparse-dense product.
    """
    weights, h = as_tensor(weights), as_tensor(h)
    src = np.asarray(src, dtype=np.int64)
    ptr = np.asarray(ptr, dtype=np.int64)
    n_out, n_in = len(ptr) - 1, h.shape[0]
    wd, hd = weights.data, h.data
    s = sp.csr_matrix((wd, src, ptr), shape=(n_out, n_in))
    dst = np.repeat(np.arange(n_out), np.diff(ptr))

    def back(g):
        g = np.ascontiguousarray(g)
        if n_out * n_in <= 4_000_000:
            gw = (g @ hd.T)[dst, src]
        else:
            gw = np.einsum("ij,ij->i", g[dst], hd[src])
        return gw, np.asarray(s.T @ g)

    return _result("edge_aggregate", np.asarray(s @ hd), (weights, h), back)


# -- distributions ----------------------------------------------------------------------

def softmax(z) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    z = as_tensor(z)
    e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (z,), back)


def masked_softmax(z, mask=None) -> Tensor:
    """Softmax over entries where ``mask`` is True; masked entries are exactly 0.

    ``mask=None`` keeps everything.  A fully masked row raises.
    """
    z = as_tensor(z)
    if mask is None:
        return softmax(z)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != z.shape:
        raise InputError(f"mask shape {mask.shape} != {z.shape}")
    if not mask.any(axis=-1).all():
        raise EmptySupportError("masked_softmax: no unmasked entries")
    zd = np.where(mask, z.data, -np.inf)
    e = np.where(mask, np.exp(zd - zd.max(axis=-1, keepdims=True)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("masked_softmax", y, (z,), back)


def log_softmax(z) -> Tensor:
    z = as_tensor(z)
    sh = z.data - z.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(sh).sum(axis=-1, keepdims=True))
    y = sh - lse
    p = np.exp(y)
    return _result("log_softmax", y, (z,),
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def nll(prob, label: int) -> Tensor:
    """``-log(prob[label])`` with the probability clamped at 1e-12."""
    prob = as_tensor(prob)
    p = prob.data
    if p.ndim != 1:
        raise InputError("nll expects a single distribution")
    if not 0 <= int(label) < len(p):
        raise InputError(f"label {label} out of range for {len(p)} classes")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InputError(f"nll input is not a distribution (sums to {p.sum()})")
    pl = p[label]
    clamped = pl < PROB_CLAMP

    def back(g):
        out = np.zeros_like(p)
        if not clamped:
            out[label] = -float(g) / pl
        return (out,)

    return _result("nll", np.asarray(-math.log(max(pl, PROB_CLAMP))), (prob,), back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    z = logits.data
    sh = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(sh).sum(axis=1))
    loss = float(np.mean(lse - sh[np.arange(n), labels]))
    p = np.exp(sh - lse[:, None])

    def back(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(g) / n),)

    return _result("cross_entropy", np.asarray(loss), (logits,), back)


def attention(q, K, V, d_k: int) -> Tensor:
    """Scaled dot-product attention of one query over key/value rows."""
    q, K, V = as_tensor(q), as_tensor(K), as_tensor(V)
    if q.data.ndim != 1 or K.data.ndim != 2 or V.data.ndim != 2:
        raise InputError("attention expects q (d,), K (n, d), V (n, dv)")
    if q.shape[0] != d_k or K.shape[1] != d_k or K.shape[0] != V.shape[0]:
        raise InputError(f"attention shape mismatch q{q.shape} K{K.shape} V{V.shape} d_k={d_k}")
    qd, Kd, Vd = q.data, K.data, V.data
    scale = 1.0 / math.sqrt(d_k)
    s = (Kd @ qd) * scale
    e = np.exp(s - s.max())
    w = e / e.sum()
    ctx = w @ Vd

    def back(g):
        gw = Vd @ g
        gs = w * (gw - gw @ w) * scale
        return Kd.T @ gs, np.outer(gs, qd), np.outer(w, g)

    return _result("attention", ctx, (q, K, V), back)


# -- gradients & updates --------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns a gradient per watched parameter."""
    if loss.data.size != 1:
        raise InputError("backward needs a scalar root")
    if loss.tape is not tape:
        raise InputError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = grads.pop(op.out.uid, None)
        if g is None:
            continue
        for inp, gi in zip(op.inputs, op.backward(g)):
            if gi is None or inp.tape is not tape:
                continue
            if inp.uid in grads:
                grads[inp.uid] = grads[inp.uid] + gi
            else:
                grads[inp.uid] = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
    out = {}
    for name, t in tape.params.items():
        g = grads.get(t.uid)
        out[name] = np.zeros_like(t.data) if g is None else _finite(np.asarray(g), f"grad {name}")
    return out


def sgd_step(params: dict, grads: dict, lr: float, direction: str = "descend") -> dict:
    """``θ ± lr·g`` for every parameter; returns new arrays."""
    if set(params) != set(grads):
        raise InputError("parameter and gradient key sets differ")
    if direction not in ("ascend", "descend"):
        raise InputError(f"unknown direction {direction!r}")
    sign = 1.0 if direction == "ascend" else -1.0
    out = {}
    for k, v in params.items():
        g = np.asarray(grads[k])
        if g.shape != np.shape(v):
            raise InputError(f"gradient shape {g.shape} != parameter shape {np.shape(v)} for {k!r}")
        out[k] = np.asarray(v, dtype=np.float64) + sign * lr * g
    return out


class Adam:
    """Adam optimiser over a parameter dict (descent)."""

    def __init__(self, lr=0.005, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k] + self.wd * p
            m = self.m.get(k, np.zeros_like(p)) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, np.zeros_like(p)) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            out[k] = p - self.lr * mh / (np.sqrt(vh) + self.eps)
        return out


def finite_difference_grad(f: Callable[[dict], float], params: dict, eps: float = 1e-5,
                           keys: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Central differences of a scalar function of a parameter dict."""
    grads = {}
    for k in (keys if keys is not None else params):
        base = np.array(params[k], dtype=np.float64)
        g = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            plus = dict(params)
            minus = dict(params)
            a = base.copy()
            a[i] += eps
            plus[k] = a
            b = base.copy()
            b[i] -= eps
            minus[k] = b
            g[i] = (f(plus) - f(minus)) / (2 * eps)
        grads[k] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> float:
    worst = 0.0
    for k in numeric:
        a, n = np.asarray(analytic[k]), np.asarray(numeric[k])
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


# -- checkpoints ----------------------------------------------------------------------------

def save_params(path, params: dict[str, np.ndarray]) -> None:
    """Text checkpoint: ``name<TAB>d0,d1,...<TAB>v v v`` with 17 significant digits."""
    with open(path, "w") as fh:
        for name in sorted(params):
            a = np.asarray(params[name], dtype=np.float64)
            shape = ",".join(str(d) for d in a.shape)
            vals = " ".join(format(float(x), ".17g") for x in a.ravel())
            fh.write(f"{name}\t{shape}\t{vals}\n")


def load_params(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                name, shape, vals = line.split("\t")
                dims = tuple(int(d) for d in shape.split(",")) if shape else ()
                arr = np.array([float(v) for v in vals.split()] if vals else [], dtype=np.float64)
                out[name] = arr.reshape(dims)
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: bad checkpoint line ({exc})") from exc
    return out
