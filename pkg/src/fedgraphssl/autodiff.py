"""Reverse-mode automatic differentiation over dense float64 matrices.

Tape style: every forward pass builds a fresh graph of Tensor nodes, and
backward() walks that graph exactly once in reverse topological order,
returning a gradient map over the leaf parameters. Values are always 2-D
float64 arrays; scalars are 1x1 matrices.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

# Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log.
PROB_EPS = 1e-7


class Tensor:
    """A node in the differentiation graph: a matrix plus its gradient slot."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(
        self,
        value,
        parents: tuple = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = True,
    ):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim != 2:
            raise ShapeError(f"tensor values must be 2-D matrices, got ndim={arr.ndim}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor holds non-finite values")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError("item() requires a 1x1 tensor")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def param(value) -> Tensor:
    """A trainable leaf."""
    return Tensor(value, requires_grad=True)


def constant(value) -> Tensor:
    """A non-trainable leaf; gradients are never accumulated into it."""
    return Tensor(value, requires_grad=False)


def _node(value, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        value,
        parents=tuple(parents),
        backward_fn=backward_fn if needs else None,
        requires_grad=needs,
    )


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += g


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) through the tape.

    Returns a map from each trainable leaf to its gradient. The loss must be
    scalar (1x1). Gradient buffers are freshly zeroed for every node on the
    tape, so repeated calls do not accumulate across passes.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be a 1x1 scalar, got {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    for node in topo:
        node.grad = np.zeros_like(node.value)
    loss.grad[0, 0] = 1.0

    for node in reversed(topo):
        if node.backward_fn is not None:
            node.backward_fn(node.grad)

    return {n: n.grad for n in topo if n.requires_grad and not n.parents}


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape} do not align")
    out = a.value @ b.value

    def bw(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _node(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g.T)

    return _node(a.value.T, (a,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.value + b.value, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.value - b.value, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bw(g):
        _accum(a, g * b.value)
        _accum(b, g * a.value)

    return _node(a.value * b.value, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(a, g * c)

    return _node(a.value * c, (a,), bw)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """a + v with v a 1 x m row vector broadcast over the rows of a."""
    if v.rows != 1 or v.cols != a.cols:
        raise ShapeError(f"add_rowvec: {a.shape} + {v.shape}")

    def bw(g):
        _accum(a, g)
        _accum(v, g.sum(axis=0, keepdims=True))

    return _node(a.value + v.value, (a, v), bw)


def sub_rowvec(a: Tensor, v: Tensor) -> Tensor:
    if v.rows != 1 or v.cols != a.cols:
        raise ShapeError(f"sub_rowvec: {a.shape} - {v.shape}")

    def bw(g):
        _accum(a, g)
        _accum(v, -g.sum(axis=0, keepdims=True))

    return _node(a.value - v.value, (a, v), bw)


def mul_rowvec(a: Tensor, v: Tensor) -> Tensor:
    if v.rows != 1 or v.cols != a.cols:
        raise ShapeError(f"mul_rowvec: {a.shape} * {v.shape}")

    def bw(g):
        _accum(a, g * v.value)
        _accum(v, (g * a.value).sum(axis=0, keepdims=True))

    return _node(a.value * v.value, (a, v), bw)


def mul_colvec(a: Tensor, v: Tensor) -> Tensor:
    """a * v with v an n x 1 column vector broadcast over the columns of a."""
    if v.cols != 1 or v.rows != a.rows:
        raise ShapeError(f"mul_colvec: {a.shape} * {v.shape}")

    def bw(g):
        _accum(a, g * v.value)
        _accum(v, (g * a.value).sum(axis=1, keepdims=True))

    return _node(a.value * v.value, (a, v), bw)


def scalar_mul(a: Tensor, s: Tensor) -> Tensor:
    """a * s with s a 1x1 tensor."""
    if s.shape != (1, 1):
        raise ShapeError("scalar_mul: multiplier must be 1x1")

    def bw(g):
        _accum(a, g * s.value[0, 0])
        _accum(s, np.array([[float((g * a.value).sum())]]))

    return _node(a.value * s.value[0, 0], (a, s), bw)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.value, 0.0)

    def bw(g):
        _accum(a, g * (a.value > 0.0))

    return _node(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails.
    out = np.empty_like(a.value)
    pos = a.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    ez = np.exp(a.value[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g):
        _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)

    def bw(g):
        _accum(a, g * out)

    return _node(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0.0):
        raise DomainError("log of non-positive value; clamp probabilities first")
    out = np.log(a.value)

    def bw(g):
        _accum(a, g / a.value)

    return _node(out, (a,), bw)


def powf(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if p != int(p) and np.any(a.value < 0.0):
        raise DomainError("fractional power of negative value")
    if p < 0 and np.any(a.value == 0.0):
        raise DomainError("negative power of zero")
    out = a.value ** p

    def bw(g):
        _accum(a, g * p * a.value ** (p - 1.0))

    return _node(out, (a,), bw)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient passes through the interior only."""
    out = np.clip(a.value, lo, hi)
    inside = (a.value >= lo) & (a.value <= hi)

    def bw(g):
        _accum(a, g * inside)

    return _node(out, (a,), bw)


def softmax_rows(z: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    shifted = z.value - z.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        _accum(z, out * (g - inner))

    return _node(out, (z,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, np.full_like(a.value, g[0, 0]))

    return _node(np.array([[a.value.sum()]]), (a,), bw)


def sum_rows(a: Tensor) -> Tensor:
    """Sum along each row, producing an n x 1 column."""

    def bw(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _node(a.value.sum(axis=1, keepdims=True), (a,), bw)


def sum_cols(a: Tensor) -> Tensor:
    """Sum down each column, producing a 1 x m row."""

    def bw(g):
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _node(a.value.sum(axis=0, keepdims=True), (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.value.size)


def _scatter_rows(idx: np.ndarray, vals: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of vals into an (n, m) matrix at the given row indices.

    bincount over flattened positions; much faster than unbuffered add.at.
    """
    m = vals.shape[1]
    flat = (idx[:, None] * m + np.arange(m)).ravel()
    return np.bincount(flat, weights=vals.ravel(), minlength=n * m).reshape(n, m)


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = a.value[idx]

    def bw(g):
        if a.requires_grad:
            a.grad += _scatter_rows(idx, g, a.rows)

    return _node(out, (a,), bw)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is drawn from rng and treated as constant."""
    if not 0.0 <= p < 1.0:
        raise DomainError(f"dropout rate {p} outside [0, 1)")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)

    def bw(g):
        _accum(a, g * mask)

    return _node(a.value * mask, (a,), bw)


# ---------------------------------------------------------------------------
# sparse message-passing operations over an undirected edge list
# ---------------------------------------------------------------------------
# Edges are given as parallel index arrays (ei, ej) listing each undirected
# edge once. All operations treat (i, j) symmetrically.

def edge_degree(e: Tensor, ei, ej, n: int, self_weight: float = 1.0) -> Tensor:
    """Weighted node degrees deg_i = self_weight + sum of incident edge values."""
    if e.cols != 1:
        raise ShapeError("edge values must be an E x 1 column")
    ei = np.asarray(ei, dtype=np.intp)
    ej = np.asarray(ej, dtype=np.intp)
    deg = np.full((n, 1), float(self_weight))
    deg += _scatter_rows(ei, e.value, n)
    deg += _scatter_rows(ej, e.value, n)

    def bw(g):
        _accum(e, g[ei] + g[ej])

    return _node(deg, (e,), bw)


def edge_gate(e: Tensor, s: Tensor, ei, ej) -> Tensor:
    """Per-edge scaling by both endpoint values: out_k = e_k * s_i * s_j."""
    if s.cols != 1 or e.cols != 1:
        raise ShapeError("edge_gate expects column vectors")
    ei = np.asarray(ei, dtype=np.intp)
    ej = np.asarray(ej, dtype=np.intp)
    si = s.value[ei]
    sj = s.value[ej]
    out = e.value * si * sj

    def bw(g):
        _accum(e, g * si * sj)
        if s.requires_grad:
            s.grad += _scatter_rows(ei, g * e.value * sj, s.rows)
            s.grad += _scatter_rows(ej, g * e.value * si, s.rows)

    return _node(out, (e, s), bw)


def edge_propagate(e: Tensor, h: Tensor, ei, ej, n: int) -> Tensor:
    """Weighted neighbor sum: out_i = sum over edges (i,j) of e_k * h_j, both directions."""
    if e.cols != 1:
        raise ShapeError("edge values must be an E x 1 column")
    ei = np.asarray(ei, dtype=np.intp)
    ej = np.asarray(ej, dtype=np.intp)
    out = _scatter_rows(ei, e.value * h.value[ej], n)
    out += _scatter_rows(ej, e.value * h.value[ei], n)

    def bw(g):
        if h.requires_grad:
            h.grad += _scatter_rows(ej, e.value * g[ei], h.rows)
            h.grad += _scatter_rows(ei, e.value * g[ej], h.rows)
        if e.requires_grad:
            ge = (g[ei] * h.value[ej]).sum(axis=1, keepdims=True)
            ge += (g[ej] * h.value[ei]).sum(axis=1, keepdims=True)
            _accum(e, ge)

    return _node(out, (e, h), bw)


def neighbor_mean(h: Tensor, ei, ej, n: int) -> Tensor:
    """Unweighted mean over graph neighbors; isolated nodes get a zero row."""
    ei = np.asarray(ei, dtype=np.intp)
    ej = np.asarray(ej, dtype=np.intp)
    ones = np.ones((ei.size, 1))
    count = _scatter_rows(ei, ones, n) + _scatter_rows(ej, ones, n)
    safe = np.where(count > 0, count, 1.0)
    total = _scatter_rows(ei, h.value[ej], n) + _scatter_rows(ej, h.value[ei], n)
    out = total / safe

    def bw(g):
        if h.requires_grad:
            gn = g / safe
            h.grad += _scatter_rows(ej, gn[ei], h.rows)
            h.grad += _scatter_rows(ei, gn[ej], h.rows)

    return _node(out, (h,), bw)


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------

def adam_init(params: Iterable[Tensor]) -> dict:
    return {
        "step": 0,
        "m": {id(p): np.zeros_like(p.value) for p in params},
        "v": {id(p): np.zeros_like(p.value) for p in params},
    }


def adam_step(
    params: Sequence[Tensor],
    grads: dict[Tensor, np.ndarray],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict:
    """One Adam update with bias correction; parameter values are updated in place."""
    state["step"] += 1
    t = state["step"]
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.value.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != param {p.value.shape}")
        m = state["m"][id(p)]
        v = state["v"][id(p)]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state
