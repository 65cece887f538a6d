"""Minimal reverse-mode autodiff over numpy arrays.

Purpose-built for the fixed computation graph of the event model:
broadcast arithmetic, matmul, row gather, the logistic/softmax family,
layer norm building blocks and axis reductions. Nothing else.

Every op in this module also accepts plain ndarrays (or python scalars)
and then evaluates eagerly without building a graph, so the same forward
code serves both training (Tensors) and the real-time inference path
(raw arrays).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Array node in the autodiff graph."""

    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    # keep numpy from absorbing Tensor operands into object arrays
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, data, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = parents if _GRAD_ENABLED else ()
        self._backward = backward if _GRAD_ENABLED else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(np.asarray(g), self.data.shape)

    # -- graph traversal ---------------------------------------------------

    def backward(self):
        """Reverse-accumulate gradients from this scalar node."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _toposort(root):
    """Iterative DFS topological order (graphs can be 1e4+ nodes deep)."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def is_tensor(x):
    return isinstance(x, Tensor)


def val(x):
    """Underlying ndarray (or scalar) of a Tensor/array."""
    return x.data if isinstance(x, Tensor) else x


def _make(data, parents, backward):
    if _GRAD_ENABLED and any(isinstance(p, Tensor) for p in parents):
        tensors = tuple(p for p in parents if isinstance(p, Tensor))
        return Tensor(data, tensors, backward)
    return np.asarray(data)


# -- elementwise binary ----------------------------------------------------


def add(a, b):
    out = np.add(val(a), val(b))

    def back(g):
        if isinstance(a, Tensor):
            a.accumulate(g)
        if isinstance(b, Tensor):
            b.accumulate(g)

    return _make(out, (a, b), back)


def mul(a, b):
    av, bv = val(a), val(b)
    out = np.multiply(av, bv)

    def back(g):
        if isinstance(a, Tensor):
            a.accumulate(g * bv)
        if isinstance(b, Tensor):
            b.accumulate(g * av)

    return _make(out, (a, b), back)


def div(a, b):
    av, bv = val(a), val(b)
    out = np.divide(av, bv)

    def back(g):
        if isinstance(a, Tensor):
            a.accumulate(g / bv)
        if isinstance(b, Tensor):
            b.accumulate(-g * av / (bv * bv))

    return _make(out, (a, b), back)


def matmul(a, b):
    av, bv = val(a), val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = av @ bv

    def back(g):
        if isinstance(a, Tensor):
            a.accumulate(_unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape))
        if isinstance(b, Tensor):
            b.accumulate(_unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape))

    return _make(out, (a, b), back)


def power(a, p):
    av = val(a)
    out = np.power(av, p)

    def back(g):
        a.accumulate(g * p * np.power(av, p - 1))

    return _make(out, (a,), back)


def maximum(a, b):
    """Elementwise max; gradient follows the winning side (ties -> a)."""
    av, bv = val(a), val(b)
    out = np.maximum(av, bv)
    mask = av >= bv

    def back(g):
        if isinstance(a, Tensor):
            a.accumulate(g * mask)
        if isinstance(b, Tensor):
            b.accumulate(g * ~mask)

    return _make(out, (a, b), back)


# -- elementwise unary -----------------------------------------------------


def exp(x):
    out = np.exp(val(x))

    def back(g):
        x.accumulate(g * out)

    return _make(out, (x,), back)


def log(x):
    xv = val(x)
    out = np.log(xv)

    def back(g):
        x.accumulate(g / xv)

    return _make(out, (x,), back)


def tanh(x):
    out = np.tanh(val(x))

    def back(g):
        x.accumulate(g * (1.0 - out * out))

    return _make(out, (x,), back)


def _sigmoid_np(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    out = _sigmoid_np(np.asarray(val(x), dtype=np.float64))

    def back(g):
        x.accumulate(g * out * (1.0 - out))

    return _make(out, (x,), back)


def softplus(x):
    xv = val(x)
    out = np.logaddexp(0.0, xv)

    def back(g):
        x.accumulate(g * _sigmoid_np(np.asarray(xv, dtype=np.float64)))

    return _make(out, (x,), back)


def log_sigmoid(x):
    """log σ(x) = -softplus(-x), stable for all x."""
    return mul(softplus(mul(x, -1.0)), -1.0)


_LOG1MEXP_TINY = -1e-300


def log1mexp(x):
    """log(1 - e^x) for x < 0 (Mächler's two-branch evaluation).

    Inputs are clamped below -1e-300 so the derivative stays finite even
    when an inactive `where` branch feeds x -> 0.
    """
    xv = np.minimum(np.asarray(val(x), dtype=np.float64), _LOG1MEXP_TINY)
    out = np.where(xv > -0.6931471805599453,
                   np.log(-np.expm1(xv)),
                   np.log1p(-np.exp(xv)))

    def back(g):
        x.accumulate(g * (-1.0 / np.expm1(-xv)))

    return _make(out, (x,), back)


def clip(x, lo=None, hi=None):
    """Clamp with straight-through gradient strictly inside the bounds."""
    xv = val(x)
    out = np.clip(xv, lo, hi)
    inside = np.ones(np.shape(xv), dtype=bool)
    if lo is not None:
        inside &= xv >= lo
    if hi is not None:
        inside &= xv <= hi

    def back(g):
        x.accumulate(g * inside)

    return _make(out, (x,), back)


def where(cond, a, b):
    """Select by boolean ndarray `cond`; grads route to the chosen side."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, val(a), val(b))

    def back(g):
        if isinstance(a, Tensor):
            a.accumulate(np.where(cond, g, 0.0))
        if isinstance(b, Tensor):
            b.accumulate(np.where(cond, 0.0, g))

    return _make(out, (a, b), back)


# -- reductions ------------------------------------------------------------


def sum_(x, axis=None, keepdims=False):
    xv = val(x)
    out = np.sum(xv, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, np.shape(xv)))

    return _make(out, (x,), back)


def mean(x, axis=None, keepdims=False):
    xv = val(x)
    out = np.mean(xv, axis=axis, keepdims=keepdims)
    n = xv.size if axis is None else np.prod(
        [np.shape(xv)[a] for a in np.atleast_1d(axis)])

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, np.shape(xv)) / n)

    return _make(out, (x,), back)


def logsumexp(x, axis=-1, keepdims=False):
    xv = val(x)
    m = np.max(xv, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(xv - m), axis=axis, keepdims=True)
    outk = m + np.log(s)
    out = outk if keepdims else np.squeeze(outk, axis=axis)
    soft = np.exp(xv - outk)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(g * soft)

    return _make(out, (x,), back)


# -- shape / indexing ------------------------------------------------------


def reshape(x, shape):
    xv = val(x)
    out = np.reshape(xv, shape)

    def back(g):
        x.accumulate(np.reshape(g, np.shape(xv)))

    return _make(out, (x,), back)


def expand_last(x):
    """Append a trailing length-1 axis."""
    return reshape(x, tuple(np.shape(val(x))) + (1,))


def getitem(x, idx):
    xv = val(x)
    out = xv[idx]

    def back(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        x.accumulate(full)

    return _make(out, (x,), back)


def take_rows(table, ids):
    """Row gather: table[ids]. Backward scatter-adds into the table."""
    ids = np.asarray(ids)
    tv = val(table)
    out = tv[ids]

    def back(g):
        full = np.zeros_like(tv)
        np.add.at(full, ids, g)
        table.accumulate(full)

    return _make(out, (table,), back)


def take_along(x, idx):
    """Gather along the last axis with integer index array idx (shape x[:-1])."""
    xv = val(x)
    idx = np.asarray(idx)
    out = np.take_along_axis(xv, idx[..., None], axis=-1)[..., 0]

    def back(g):
        full = np.zeros_like(xv)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        x.accumulate(full)

    return _make(out, (x,), back)


def concat(xs, axis=-1):
    vs = [val(x) for x in xs]
    out = np.concatenate(vs, axis=axis)
    sizes = [v.shape[axis] for v in vs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for x, gpart in zip(xs, np.split(g, splits, axis=axis)):
            if isinstance(x, Tensor):
                x.accumulate(gpart)

    return _make(out, tuple(xs), back)


def stack(xs, axis=0):
    vs = [val(x) for x in xs]
    out = np.stack(vs, axis=axis)

    def back(g):
        for i, x in enumerate(xs):
            if isinstance(x, Tensor):
                x.accumulate(np.take(g, i, axis=axis))

    return _make(out, tuple(xs), back)
