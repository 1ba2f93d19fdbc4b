"""Reverse-mode autodiff over float64 numpy arrays.

A Tensor wraps an ndarray plus, when gradients are enabled, a backward
closure and its parents. Calling ``backward()`` on a scalar walks the
recorded graph in reverse topological order and accumulates ``.grad`` on
every tensor with ``requires_grad``. Everything is float64 and
single-threaded; two runs with the same inputs produce identical bits.

The heavy per-element math (layernorm, gelu, softmax, cross-entropy) is
delegated to :mod:`atlas_sc.kernels`; this module owns shapes, broadcasting
and the graph bookkeeping.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels


class NumericsError(ArithmeticError):
    """Non-finite values where the math requires finite input."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor. Without an explicit seed the
        tensor must be scalar (the usual loss case)."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient seed needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ValueError("gradient seed shape mismatch")

        order = _toposort(self)
        self._accumulate(grad)
        for node in order:
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def _toposort(root: Tensor) -> list[Tensor]:
    """Nodes reachable from root, root first (iterative, deep-graph safe)."""
    order: list[Tensor] = []
    visited = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def _wrap(other) -> Tensor:
    return other if isinstance(other, Tensor) else Tensor(other)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _wrap(a)
        c = float(b)

        def backward_scalar(g):
            a._accumulate(g * c)

        return _node(a.data * c, (a,), backward_scalar)

    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def backward(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        a._accumulate(_unbroadcast(g @ bt, a.data.shape))
        b._accumulate(_unbroadcast(at @ g, b.data.shape))

    return _node(out_data, (a, b), backward)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _node(out_data, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return _node(out_data, (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _wrap(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = x.data.transpose(axes)

    def backward(g):
        x._accumulate(g.transpose(inverse))

    return _node(out_data, (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _node(out_data, tuple(tensors), backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))

    return _node(out_data, tuple(tensors), backward)


def take(x, indices, axis=0) -> Tensor:
    """Gather along an axis with an integer index array (scatter-add backward)."""
    x = _wrap(x)
    indices = np.asarray(indices)
    ax = axis % x.data.ndim
    out_data = np.take(x.data, indices, axis=ax)
    prefix = (slice(None),) * ax

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, prefix + (indices,), g)
        x._accumulate(gx)

    return _node(out_data, (x,), backward)


def expand(x, shape) -> Tensor:
    """Broadcast to `shape`; backward sums over the broadcast axes."""
    x = _wrap(x)
    out_data = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        x._accumulate(_unbroadcast(g, x.data.shape))

    return _node(out_data, (x,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup into `table` by an integer id array of any shape."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        table._accumulate(gt)

    return _node(out_data, (table,), backward)


# ---------------------------------------------------------------------------
# fused ops backed by kernels
# ---------------------------------------------------------------------------


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    x2 = _rows(x.data)
    y2, mu, rstd = kernels.layernorm_fwd(x2, gain.data, bias.data, eps)

    def backward(g):
        g2 = _rows(g)
        gx, ggain, gbias = kernels.layernorm_bwd(g2, x2, gain.data, mu, rstd)
        x._accumulate(gx.reshape(x.data.shape))
        gain._accumulate(ggain)
        bias._accumulate(gbias)

    return _node(y2.reshape(x.data.shape), (x, gain, bias), backward)


def gelu(x) -> Tensor:
    x = _wrap(x)
    xc = np.ascontiguousarray(x.data)
    y = kernels.gelu_fwd(xc)

    def backward(g):
        x._accumulate(kernels.gelu_bwd(np.ascontiguousarray(g), xc))

    return _node(y, (x,), backward)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis`; rows land on the simplex."""
    x = _wrap(x)
    if np.isnan(x.data).any():
        raise NumericsError("softmax received NaN input")
    ax = axis % x.data.ndim
    moved = np.moveaxis(x.data, ax, -1)
    p2 = kernels.softmax_fwd(_rows(moved))
    p_moved = p2.reshape(moved.shape)
    out_data = np.moveaxis(p_moved, -1, ax)

    def backward(g):
        g2 = _rows(np.moveaxis(g, ax, -1))
        gx2 = kernels.softmax_bwd(g2, p2)
        x._accumulate(np.moveaxis(gx2.reshape(moved.shape), -1, ax))

    return _node(out_data, (x,), backward)


def cross_entropy_per_token(logits, targets) -> Tensor:
    """-log softmax(logits)[target] along the last axis, one loss per row."""
    logits = _wrap(logits)
    ids = np.asarray(targets, dtype=np.int64)
    vocab = logits.data.shape[-1]
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= vocab:
        raise IndexError(f"target id outside [0, {vocab})")
    flat_ids = np.ascontiguousarray(ids.reshape(-1))
    l2 = _rows(logits.data)
    losses, probs = kernels.cross_entropy_fwd(l2, flat_ids)

    def backward(g):
        gl = kernels.cross_entropy_bwd(np.ascontiguousarray(g.reshape(-1)), probs, flat_ids)
        logits._accumulate(gl.reshape(logits.data.shape))

    return _node(losses.reshape(ids.shape), (logits,), backward)


def cross_entropy(logits, targets, token_weights=None):
    """Weighted-sum cross entropy.

    Returns ``(scalar, per_token)`` where per_token carries the unweighted
    losses (the mixture model consumes those) and scalar is
    ``sum(weight_i * loss_i)``. Weights default to 1 and must be >= 0.
    """
    per_token = cross_entropy_per_token(logits, targets)
    if token_weights is None:
        w = np.ones(per_token.data.shape)
    else:
        w = np.asarray(token_weights, dtype=np.float64)
        if (w < 0).any():
            raise ValueError("token weights must be nonnegative")
    scalar = tsum(mul(per_token, Tensor(w)))
    return scalar, per_token
