"""Reverse-mode autodiff over float64 numpy arrays.

A ``Tensor`` records the op that produced it and a closure that pushes its
gradient into its parents. Gradient recording can be switched off per thread
with :func:`no_grad`, which inference paths use to skip graph construction.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .. import kernels
from ..errors import DimensionError, NonFiniteError

_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.broadcast_to(grad, self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # interior node: release graph and gradient buffer
                node._parents = ()
                node._backward = None
                node.grad = None

    # operator sugar -------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    if not np.isfinite(np.sum(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def square(a):
    def backward(g):
        a._accum(2.0 * a.data * g)

    return _make(a.data * a.data, (a,), backward, "square")


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        a._accum(g * out)

    return _make(out, (a,), backward, "exp")


def tanh(a):
    out = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out * out))

    return _make(out, (a,), backward, "tanh")


def softplus(a):
    out = np.logaddexp(0.0, a.data)

    def backward(g):
        a._accum(g * 0.5 * (1.0 + np.tanh(0.5 * a.data)))

    return _make(out, (a,), backward, "softplus")


def relu(a):
    pos = a.data > 0.0

    def backward(g):
        a._accum(g * pos)

    return _make(np.where(pos, a.data, 0.0), (a,), backward, "relu")


def mish(a):
    def backward(g):
        a._accum(kernels.mish_backward(np.ascontiguousarray(g), a.data))

    return _make(kernels.mish_forward(a.data), (a,), backward, "mish")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        a._accum(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(0.5 * x * (1.0 + t), (a,), backward, "gelu")


# linear algebra and shape ------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                b._accum(a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def reshape(a, shape):
    old = a.shape

    def backward(g):
        a._accum(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accum(g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def getitem(a, idx):
    advanced = isinstance(idx, (list, np.ndarray)) or (
        isinstance(idx, tuple) and any(isinstance(i, (list, np.ndarray)) for i in idx))

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        a._accum(full)

    return _make(a.data[idx], (a,), backward, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def sum_(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# fused normalisation / attention / convolution ------------------------------

def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalise over the last axis, then apply the optional affine map."""
    shape = x.shape
    xhat, rstd = kernels.layer_norm_forward(np.ascontiguousarray(x.data.reshape(-1, shape[-1])), eps)

    def backward(g):
        x._accum(kernels.layer_norm_backward(
            np.ascontiguousarray(g.reshape(-1, shape[-1])), xhat, rstd).reshape(shape))

    out = _make(xhat.reshape(shape), (x,), backward, "layer_norm")
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def group_norm(x, groups, gamma=None, beta=None, eps=1e-5):
    """Group normalisation of channels-last (B, T, C) activations."""
    if x.ndim != 3 or x.shape[-1] % groups:
        raise DimensionError(f"group_norm needs (B, T, C) with C divisible by {groups}, got {x.shape}")
    xhat, rstd = kernels.group_norm_forward(np.ascontiguousarray(x.data), groups, eps)

    def backward(g):
        x._accum(kernels.group_norm_backward(np.ascontiguousarray(g), xhat, rstd, groups))

    out = _make(xhat, (x,), backward, "group_norm")
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def masked_softmax(s, mask):
    """Softmax over the last axis restricted to ``mask``; s is (..., T, S)."""
    shape = s.shape
    s3 = np.ascontiguousarray(s.data.reshape(-1, shape[-2], shape[-1]))
    m3 = np.ascontiguousarray(np.broadcast_to(mask, shape).reshape(s3.shape))
    p = kernels.masked_softmax_forward(s3, m3)

    def backward(g):
        s._accum(kernels.masked_softmax_backward(
            np.ascontiguousarray(g.reshape(p.shape)), p).reshape(shape))

    return _make(p.reshape(shape), (s,), backward, "masked_softmax")


def conv1d(x, w, b):
    """Same-padded temporal convolution; x (B, T, Ci), w (k, Ci, Co), b (Co,)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}")
    xs = x.shape
    y, cols = kernels.conv1d_forward(np.ascontiguousarray(x.data), w.data, b.data)

    def backward(g):
        gx, gw, gb = kernels.conv1d_backward(np.ascontiguousarray(g), cols, w.data, xs)
        if x.requires_grad:
            x._accum(gx)
        if w.requires_grad:
            w._accum(gw)
        if b.requires_grad:
            b._accum(gb)

    return _make(y, (x, w, b), backward, "conv1d")


def dropout(x, p, rng):
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)


def mse(pred, target, weights=None):
    """Mean squared error; with ``weights`` the sum is normalised by the weight mass."""
    diff = sub(pred, target)
    sq = square(diff)
    if weights is None:
        return mean(sq)
    w = np.asarray(weights, dtype=np.float64)
    return mul(sum_(mul(sq, w)), 1.0 / float(np.sum(np.broadcast_to(w, sq.shape))))
