"""Reverse-mode autodiff over numpy arrays for the small fixed networks.

Nodes form an implicit tape: each Var built from tracked inputs keeps its
parent Vars and a VJP closure. Leaves created with requires_grad=False
propagate no tape, so inference and finite-difference probes pay only for
the raw numpy arithmetic. Dtype follows the inputs: float32 at runtime,
float64 on checker paths.
"""

from __future__ import annotations

import numpy as np

from .numerics import DegenerateMaskError


class Var:
    """Array value tracked for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape}, grad={self.requires_grad})"

    def detach(self) -> "Var":
        return Var(self.data)

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar")
        order: list[Var] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _tracked(*vs: Var) -> bool:
    return any(v.requires_grad for v in vs)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data + b.data
    if not _tracked(a, b):
        return Var(out)
    return Var(out, True, (a, b),
               lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data - b.data
    if not _tracked(a, b):
        return Var(out)
    return Var(out, True, (a, b),
               lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data * b.data
    if not _tracked(a, b):
        return Var(out)
    return Var(out, True, (a, b),
               lambda g: (_unbroadcast(g * b.data, a.data.shape),
                          _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data / b.data
    if not _tracked(a, b):
        return Var(out)
    return Var(out, True, (a, b),
               lambda g: (_unbroadcast(g / b.data, a.data.shape),
                          _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data @ b.data
    if not _tracked(a, b):
        return Var(out)
    return Var(out, True, (a, b),
               lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Var:
    a = as_var(a)
    if not a.requires_grad:
        return Var(a.data.T)
    return Var(a.data.T, True, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Var:
    a = as_var(a)
    out = a.data.reshape(shape)
    if not a.requires_grad:
        return Var(out)
    return Var(out, True, (a,), lambda g: (g.reshape(a.data.shape),))


def take(a, idx) -> Var:
    a = as_var(a)
    out = a.data[idx]
    if not a.requires_grad:
        return Var(out)

    def vjp(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return Var(out, True, (a,), vjp)


def concat(parts, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    if not _tracked(*parts):
        return Var(out)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(out, True, tuple(parts), vjp)


def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    if not a.requires_grad:
        return Var(out)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Var(out, True, (a,), vjp)


def vmean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.data)
    if not a.requires_grad:
        return Var(out)
    return Var(out, True, (a,), lambda g: (g * out,))


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.data)
    if not a.requires_grad:
        return Var(out)
    return Var(out, True, (a,), lambda g: (g * (0.5 / out),))


def absval(a) -> Var:
    a = as_var(a)
    out = np.abs(a.data)
    if not a.requires_grad:
        return Var(out)
    return Var(out, True, (a,), lambda g: (g * np.sign(a.data),))


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.data)
    if not a.requires_grad:
        return Var(out)
    return Var(out, True, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Var:
    a = as_var(a)
    # stable two-branch form
    out = np.where(a.data >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = out.astype(a.data.dtype, copy=False)
    if not a.requires_grad:
        return Var(out)
    return Var(out, True, (a,), lambda g: (g * out * (1.0 - out),))


def softmax_rows(a) -> Var:
    """Stable row softmax; -inf logits are legal as long as each row keeps
    one finite entry."""
    a = as_var(a)
    row_max = np.max(a.data, axis=1, keepdims=True)
    if np.isneginf(row_max).any():
        raise DegenerateMaskError("softmax row with every entry masked to -inf")
    e = np.exp(a.data - row_max)
    out = e / e.sum(axis=1, keepdims=True)
    if not a.requires_grad:
        return Var(out)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return Var(out, True, (a,), vjp)


def minmax_norm(a) -> Var:
    """(x - min) / (max - min); all zeros on constant input (zero gradient)."""
    a = as_var(a)
    flat = a.data.ravel()
    i_min = int(np.argmin(flat))
    i_max = int(np.argmax(flat))
    lo, hi = flat[i_min], flat[i_max]
    span = hi - lo
    if span == 0:
        out = np.zeros_like(a.data)
        if not a.requires_grad:
            return Var(out)
        return Var(out, True, (a,), lambda g: (np.zeros_like(a.data),))
    out = (a.data - lo) / span
    if not a.requires_grad:
        return Var(out)

    def vjp(g):
        gx = (g / span).copy()
        flat_gx = gx.ravel()
        s_all = g.sum() / span
        s_span = (g * out).sum() / span
        flat_gx[i_min] += -s_all + s_span
        flat_gx[i_max] += -s_span
        return (gx,)

    return Var(out, True, (a,), vjp)


def clamp(a, lo: float, hi: float) -> Var:
    """Clip to [lo, hi]; gradient passes through the closed interval."""
    a = as_var(a)
    out = np.clip(a.data, lo, hi)
    if not a.requires_grad:
        return Var(out)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)
    return Var(out, True, (a,), lambda g: (g * inside,))


def l2_norm(a) -> Var:
    """Euclidean norm of all entries: sqrt(sum(x^2))."""
    return sqrt(vsum(mul(a, a)))
