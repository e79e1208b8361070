"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the model needs are provided. Every op records its parents
and a closure that maps the output gradient to parent gradients; ``backward``
walks the recorded graph once in reverse topological order and then releases
it, so calling it twice on the same loss is an error.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import GraphError, ShapeError

DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_released")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None, op=""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self._released = False

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self):
        return swap_last(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn, op):
    if not (_GRAD_ENABLED and any(p.requires_grad for p in parents)):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b, op):
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return a, b


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb
    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb
    return _make(a.data / b.data, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _make(out, (a, b), bw, "matmul")


# -- elementwise unary -------------------------------------------------------

def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sin(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def abs_(x) -> Tensor:
    """|x| with subgradient 0 at the kink."""
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def wrap_angle(x) -> Tensor:
    """Principal angle in (-pi, pi]; locally the identity, so the gradient passes through."""
    x = as_tensor(x)
    d = x.data
    inside = (d > -math.pi) & (d <= math.pi)
    if inside.all():
        y = d.copy()
    else:
        w = np.remainder(d + math.pi, 2 * math.pi) - math.pi
        w = np.where(w <= -math.pi, w + 2 * math.pi, w)
        y = np.where(inside, d, w).astype(d.dtype)
    return _make(y, (x,), lambda g: (g,), "wrap_angle")


# -- shape ops ---------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _make(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    parts = idx if isinstance(idx, tuple) else (idx,)
    fancy = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        out = np.zeros(x.shape, dtype=g.dtype)
        if fancy:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)
    return _make(x.data[idx], (x,), bw, "slice")


def concat(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(y, tuple(ts), bw, "concat")


def stack(tensors, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else axis + ts[0].ndim + 1
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


# -- reductions --------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _make(y, (x,), lambda g: (_expand_reduced(g, x.shape, axis, keepdims),), "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    y = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(y.size, 1) if x.size else 1

    def bw(g):
        return (_expand_reduced(g, x.shape, axis, keepdims) / count,)
    return _make(y, (x,), bw, "mean")


# -- neural-network ops ------------------------------------------------------

def softmax(x) -> Tensor:
    """Softmax over the last axis (max-shifted)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _make(y, (x,), bw, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb
    return _make(y, (x, gamma, beta), bw, "layer_norm")


def masked_fill(x, mask, value) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        y = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    except ValueError:
        raise ShapeError("masked_fill", x.shape, mask.shape) from None
    if y.shape != x.shape:
        raise ShapeError("masked_fill", x.shape, mask.shape)
    return _make(y, (x,), lambda g: (np.where(mask, 0, g),), "masked_fill")


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- backward ----------------------------------------------------------------

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Interior gradients are discarded and the graph is released afterwards.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every parameter")
    leaf = loss._backward is None
    order = _topo_order(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._released = True
    if not leaf:
        loss._released = True
