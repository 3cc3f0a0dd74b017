"""Dense 2-D float64 arrays with a reverse-mode tape.

Every value carried by a :class:`Node` is a C-contiguous ``(rows, cols)``
float64 array.  Ops build new nodes holding a closure that maps the output
gradient to one gradient per parent; :meth:`Node.backward` walks the graph in
reverse topological order and accumulates.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class NumericsError(ValueError):
    """Raised for shape mismatches, non-finite values and degenerate inputs."""


class DimensionError(NumericsError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"expected at most 2 dims, got shape {a.shape}")
    return np.ascontiguousarray(a)


class Node:
    """One vertex of the tape: a value, its gradient and how it was made."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = as_matrix(value)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, lift(other))

    def __rsub__(self, other):
        return sub(lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed: np.ndarray | None = None, release: bool = True) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``.

        With ``release`` the intermediate closures are dropped afterwards so a
        tape is never reused across optimizer steps.
        """
        if seed is None:
            if self.value.size != 1:
                raise NumericsError("backward without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): as_matrix(seed).reshape(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if release:
            for node in order:
                if node.backward_fn is not None:
                    node.backward_fn = None
                    node.parents = ()


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def parameter(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value)


def _make(value: np.ndarray, parents: Sequence[Node], backward_fn: BackwardFn, op: str) -> Node:
    if not np.all(np.isfinite(value)):
        raise NumericsError(f"non-finite value produced by {op}")
    needs = any(p.requires_grad for p in parents)
    return Node(value, parents if needs else (), backward_fn if needs else None, op, needs)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a: Node, b: Node, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _make(av @ bv, (a, b), backward, "matmul")


def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), backward, "add")


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.value - b.value, (a, b), backward, "sub")


def mul(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make(av * bv, (a, b), backward, "mul")


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def concat_cols(nodes: Sequence[Node]) -> Node:
    rows = {n.rows for n in nodes}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {sorted(rows)}")
    bounds = np.cumsum([0] + [n.cols for n in nodes])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(nodes)))

    return _make(np.concatenate([n.value for n in nodes], axis=1), nodes, backward, "concat")


def concat_rows(nodes: Sequence[Node]) -> Node:
    cols = {n.cols for n in nodes}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [n.rows for n in nodes])

    def backward(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(nodes)))

    return _make(np.concatenate([n.value for n in nodes], axis=0), nodes, backward, "concat_rows")


def slice_cols(a: Node, start: int, stop: int) -> Node:
    def backward(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return (out,)

    return _make(a.value[:, start:stop].copy(), (a,), backward, "slice_cols")


def gather_rows(table: Node, index) -> Node:
    """Embedding lookup: ``out[i] = table[index[i]]``."""
    idx = np.asarray(index, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        raise DimensionError("gather_rows: index out of range")

    def backward(g):
        out = np.zeros_like(table.value)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.value[idx], (table,), backward, "gather_rows")


def transpose(a: Node) -> Node:
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def sum_all(a: Node) -> Node:
    return _make(np.array([[a.value.sum()]]), (a,), lambda g: (np.full_like(a.value, g[0, 0]),), "sum")


def mean_all(a: Node) -> Node:
    n = a.value.size
    return _make(
        np.array([[a.value.mean()]]), (a,), lambda g: (np.full_like(a.value, g[0, 0] / n),), "mean"
    )


def sum_rows(a: Node) -> Node:
    """Sum over columns, one value per row: (n, c) -> (n, 1)."""
    return _make(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum_rows")


def mean_cols(a: Node) -> Node:
    """Mean over rows: (n, c) -> (1, c)."""
    n = a.rows
    return _make(
        a.value.mean(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean_cols"
    )


def square(a: Node) -> Node:
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        raise NumericsError("log of non-positive value")
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Node) -> Node:
    out = _sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Node) -> Node:
    av = a.value
    out = np.logaddexp(0.0, av)
    return _make(out, (a,), lambda g: (g * _sigmoid(av),), "softplus")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Node) -> Node:
    """Gaussian-error linear unit, tanh approximation."""
    x = a.value
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _make(out, (a,), backward, "gelu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# normalisation and attention
# ---------------------------------------------------------------------------


def softmax_rows(logits: Node) -> Node:
    x = logits.value
    if np.any(np.isnan(x)) or np.any(x == np.inf):
        raise NumericsError("softmax_rows: logits must be finite")
    row_max = x.max(axis=1, keepdims=True)
    if np.any(row_max == -np.inf):
        raise NumericsError("softmax_rows: degenerate row (all -inf)")
    e = np.exp(x - row_max)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), backward, "softmax")


def layer_norm(x: Node, scale_: Node, shift: Node, eps: float = 1e-5) -> Node:
    if scale_.value.size != x.cols or shift.value.size != x.cols:
        raise DimensionError("layer_norm: scale/shift length must equal x.cols")
    if eps <= 0:
        raise NumericsError("layer_norm: eps must be positive")
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gamma = scale_.value.reshape(1, -1)
    out = xhat * gamma + shift.value.reshape(1, -1)

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma
            gx = inv * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        gs = (g * xhat).sum(axis=0).reshape(scale_.shape)
        gb = g.sum(axis=0).reshape(shift.shape)
        return gx, gs, gb

    return _make(out, (x, scale_, shift), backward, "layer_norm")


def dropout(x: Node, rate: float, rng: np.random.Generator | None, training: bool) -> Node:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise NumericsError("dropout in training mode needs a generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.value * keep, (x,), lambda g: (g * keep,), "dropout")


def _split_heads(a: np.ndarray, heads: int) -> np.ndarray:
    n, d = a.shape
    return a.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(a: np.ndarray) -> np.ndarray:
    h, n, dh = a.shape
    return a.transpose(1, 0, 2).reshape(n, h * dh)


def multi_head_attention(q: Node, k: Node, v: Node, heads: int) -> Node:
    """Dense ``concat_h softmax(Q_h K_h^T / sqrt(d_h)) V_h`` (no output map)."""
    if q.cols != k.cols or k.cols != v.cols or k.rows != v.rows:
        raise DimensionError(f"attention: q{q.shape} k{k.shape} v{v.shape}")
    if q.cols % heads:
        raise DimensionError("attention: width not divisible by heads")
    dh = q.cols // heads
    inv = 1.0 / math.sqrt(dh)
    qh, kh, vh = (_split_heads(t.value, heads) for t in (q, k, v))
    s = np.matmul(qh, kh.transpose(0, 2, 1)) * inv
    s -= s.max(axis=2, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=2, keepdims=True)
    out = _merge_heads(np.matmul(p, vh))

    def backward(g):
        gh = _split_heads(g, heads)
        gv = np.matmul(p.transpose(0, 2, 1), gh)
        gp = np.matmul(gh, vh.transpose(0, 2, 1))
        gs = p * (gp - (gp * p).sum(axis=2, keepdims=True)) * inv
        gq = np.matmul(gs, kh)
        gk = np.matmul(gs.transpose(0, 2, 1), qh)
        return _merge_heads(gq), _merge_heads(gk), _merge_heads(gv)

    return _make(out, (q, k, v), backward, "mha")


def graph_attention(q: Node, k: Node, v: Node, neighbors: np.ndarray, bias: Node, heads: int) -> Node:
    """Sparse attention of each row over a fixed neighbour list.

    ``neighbors`` is an ``(n, K)`` index array into the rows of ``k``/``v``;
    entries equal to ``-1`` are padding and receive zero weight.  ``bias`` is
    ``(n * K, heads)`` and is added to the scaled logits before the softmax.
    """
    n, kk = neighbors.shape
    if q.rows != n or bias.shape != (n * kk, heads):
        raise DimensionError("graph_attention: inconsistent neighbour/bias shapes")
    if q.cols % heads:
        raise DimensionError("graph_attention: width not divisible by heads")
    dh = q.cols // heads
    inv = 1.0 / math.sqrt(dh)
    pad = neighbors < 0
    idx = np.where(pad, 0, neighbors)
    qh = q.value.reshape(n, heads, dh)
    kg = k.value[idx].reshape(n, kk, heads, dh)
    vg = v.value[idx].reshape(n, kk, heads, dh)
    s = np.einsum("nhd,nkhd->nkh", qh, kg) * inv + bias.value.reshape(n, kk, heads)
    s = np.where(pad[:, :, None], -np.inf, s)
    m = s.max(axis=1, keepdims=True)
    if np.any(m == -np.inf):
        raise NumericsError("graph_attention: row with no neighbours")
    p = np.exp(s - m)
    p /= p.sum(axis=1, keepdims=True)
    out = np.einsum("nkh,nkhd->nhd", p, vg).reshape(n, heads * dh)

    def backward(g):
        gh = g.reshape(n, heads, dh)
        gp = np.einsum("nhd,nkhd->nkh", gh, vg)
        gs = p * (gp - (gp * p).sum(axis=1, keepdims=True))
        gq = np.einsum("nkh,nkhd->nhd", gs, kg) * inv
        gk_rows = (gs[..., None] * qh[:, None, :, :] * inv).reshape(n * kk, heads * dh)
        gv_rows = (p[..., None] * gh[:, None, :, :]).reshape(n * kk, heads * dh)
        flat = idx.ravel()
        keep = ~pad.ravel()
        gk = np.zeros_like(k.value)
        gv = np.zeros_like(v.value)
        np.add.at(gk, flat[keep], gk_rows[keep])
        np.add.at(gv, flat[keep], gv_rows[keep])
        return gq.reshape(n, heads * dh), gk, gv, gs.reshape(n * kk, heads)

    return _make(out, (q, k, v, bias), backward, "graph_attention")


def attention_weights(q: np.ndarray, k: np.ndarray, neighbors: np.ndarray, bias: np.ndarray, heads: int) -> np.ndarray:
    """Forward-only attention weights ``(n, K, heads)`` for inspection."""
    n, kk = neighbors.shape
    dh = q.shape[1] // heads
    pad = neighbors < 0
    idx = np.where(pad, 0, neighbors)
    s = np.einsum("nhd,nkhd->nkh", q.reshape(n, heads, dh), k[idx].reshape(n, kk, heads, dh)) / math.sqrt(dh)
    s = s + bias.reshape(n, kk, heads)
    s = np.where(pad[:, :, None], -np.inf, s)
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    return p / p.sum(axis=1, keepdims=True)


def bilinear_weights(height: int, width: int, rows: np.ndarray, cols: np.ndarray):
    """Corner indices ``(n, 4)`` and weights ``(n, 4)`` for bilinear lookup.

    Coordinates are continuous cell positions, clamped to
    ``[0, height-1] x [0, width-1]``.
    """
    r = np.clip(np.asarray(rows, dtype=np.float64), 0.0, height - 1)
    c = np.clip(np.asarray(cols, dtype=np.float64), 0.0, width - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r0 = np.minimum(r0, max(height - 2, 0))
    c0 = np.minimum(c0, max(width - 2, 0))
    r1 = np.minimum(r0 + 1, height - 1)
    c1 = np.minimum(c0 + 1, width - 1)
    fr = r - r0
    fc = c - c0
    idx = np.stack([r0 * width + c0, r0 * width + c1, r1 * width + c0, r1 * width + c1], axis=1)
    w = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    return idx, w


def grid_sample(grid: Node, height: int, width: int, rows: np.ndarray, cols: np.ndarray) -> Node:
    """Bilinear sampling of a ``(height*width, C)`` map at continuous positions."""
    if grid.rows != height * width:
        raise DimensionError("grid_sample: map rows must equal height*width")
    idx, w = bilinear_weights(height, width, rows, cols)
    out = np.einsum("nk,nkc->nc", w, grid.value[idx])

    def backward(g):
        gg = np.zeros_like(grid.value)
        np.add.at(gg, idx.ravel(), (w[:, :, None] * g[:, None, :]).reshape(-1, g.shape[1]))
        return (gg,)

    return _make(out, (grid,), backward, "grid_sample")
