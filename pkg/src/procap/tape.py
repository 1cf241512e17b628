"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus an optional backward closure; ops build a tape
that `backward()` walks in reverse topological order. Only what the model
needs is implemented: elementwise math, broadcasting matmul, reductions,
shape ops, gathers, and a sort-canonicalized summation used where reduction
order must be invariant to input permutation.

Gradients are accumulated functionally (`grad = grad + g`), never in place,
so backward closures may hand out shared arrays safely.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Backpropagate from this tensor (seed gradient of ones)."""
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar. Scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _tracked(parents):
    return _GRAD_ENABLED and any(p.requires_grad for p in parents)


def _node(data, parents, backward):
    out = Tensor(data)
    if _tracked(parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum g down to `shape`, the adjoint of numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b):
    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), bw)


def neg(a):
    def bw(g):
        _accum(a, -g)

    return _node(-a.data, (a,), bw)


def mul(a, b):
    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a, b):
    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(a.data / b.data, (a, b), bw)


def matmul(a, b):
    """Matrix product with numpy batch broadcasting on leading dims."""

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _node(a.data @ b.data, (a, b), bw)


def exp(a):
    out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), bw)


def log(a):
    def bw(g):
        _accum(a, g / a.data)

    return _node(np.log(a.data), (a,), bw)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def bw(g):
        _accum(a, g * (0.5 / out_data))

    return _node(out_data, (a,), bw)


def tanh(a):
    out_data = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bw)


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bw)


def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full_like(a.data, g))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def sorted_sum(a, axis):
    """Sum along `axis` in ascending-value order.

    Sorting canonicalizes the reduction order, so the result is bitwise
    invariant to any permutation of the inputs along that axis. The gradient
    of a sum is 1 per addend regardless of order, so backward matches tsum.
    """

    def bw(g):
        gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _node(np.sort(a.data, axis=axis).sum(axis=axis), (a,), bw)


def clip(a, lo, hi):
    """Clamp values; gradient passes only where unclamped."""
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * inside)

    return _node(np.clip(a.data, lo, hi), (a,), bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), bw)


def swapaxes(a, ax1, ax2):
    def bw(g):
        _accum(a, np.swapaxes(g, ax1, ax2))

    return _node(np.swapaxes(a.data, ax1, ax2), (a,), bw)


def transpose(a, axes):
    inv = np.argsort(axes)

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _node(np.transpose(a.data, axes), (a,), bw)


def concat(tensors, axis=0):
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def getitem(a, idx):
    """Basic slicing only; sliced regions must not repeat (no fancy indexing)."""

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        _accum(a, ga)

    return _node(a.data[idx], (a,), bw)


def embedding(table, ids):
    """Gather rows of `table` (V, D) at integer array `ids` (any shape)."""
    ids = np.asarray(ids)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _node(table.data[ids], (table,), bw)


def gather_last(a, idx):
    """Pick a[..., idx[...]] along the last axis; idx matches a's leading shape."""
    idx = np.asarray(idx)
    picked = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        _accum(a, ga)

    return _node(picked, (a,), bw)


def softmax(a, axis=-1, invariant=False):
    """Shift-stabilized softmax; `invariant` sums exponentials in sorted order."""
    m = Tensor(a.data.max(axis=axis, keepdims=True))  # constant shift, gradient-free
    e = exp(sub(a, m))
    if invariant:
        kshape = list(e.data.shape)
        kshape[axis] = 1
        denom = reshape(sorted_sum(e, axis=axis), tuple(kshape))
    else:
        denom = tsum(e, axis=axis, keepdims=True)
    return div(e, denom)


def logsumexp(a, axis=-1, keepdims=False):
    m = a.data.max(axis=axis, keepdims=True)
    s = tsum(exp(sub(a, Tensor(m))), axis=axis, keepdims=True)
    out = add(log(s), Tensor(m))
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out
