"""Dense float tensors with reverse-mode differentiation.

Graphs are built eagerly and single-threaded; ``backward`` walks the tape in
reverse topological order exactly once. Storage defaults to float32 (switchable
to float64 for finite-difference oracles via ``use_dtype``); statistics that
feed layer_norm are accumulated in float64 regardless.
"""
from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive op."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces (or receives) NaN/Inf entries."""


class GraphError(RuntimeError):
    """Raised on graph misuse, e.g. backward called twice on one graph."""


_DTYPE = np.float32


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


def _ensure_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense nd-array node in an autodiff graph.

    ``requires_grad`` leaves accumulate their total derivative in ``.grad``
    after ``backward``; intermediate gradients are freed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op",
                 "_backward_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=default_dtype())
        _ensure_finite(self.data, "leaf")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_done:
            raise GraphError("backward already called on this graph; rebuild it first")
        self._backward_done = True

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad = parent.grad + g.astype(parent.data.dtype)
            if node._parents:  # non-leaf: free its gradient
                node.grad = None


def _toposort(root):
    order = []
    seen = set()
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return list(reversed(order))


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def constant(data):
    """A tensor that never requires grad."""
    return Tensor(data, requires_grad=False)


def _make(out, parents, backward, op):
    _ensure_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t._backward_done = False
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
        t._op = op
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._op = op
    return t


def _unbroadcast(g, shape):
    """Sum a gradient down to the pre-broadcast shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def scale(a, s):
    s = float(s)
    out = a.data * np.asarray(s, dtype=a.data.dtype)

    def backward(g):
        return (g * s,)

    return _make(out, (a,), backward, "scale")


def matmul(a, b):
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if a.ndim == 1:
            ga = ga.reshape(a.shape) if ga.ndim == 1 else _unbroadcast(ga, (1,) + a.shape)[0]
            gb = np.outer(a.data, g if g.ndim == 1 else g.reshape(-1))
        else:
            ga = _unbroadcast(ga, a.shape)
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


def gelu(a):
    x = a.data
    phi = 0.5 * (1.0 + erf(x / np.sqrt(2.0, dtype=x.dtype)))
    out = (x * phi).astype(x.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (phi + x * pdf),)

    return _make(out, (a,), backward, "gelu")


def layer_norm(a, eps=1e-5):
    """Per-row (last axis) normalization, scale=1 shift=0, float64 statistics."""
    _ensure_finite(a.data, "layer_norm(input)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = np.square(x.astype(np.float64) - mu).mean(axis=-1, keepdims=True)
    std = np.sqrt(var + eps).astype(x.dtype)
    y = ((x.astype(np.float64) - mu) / np.sqrt(var + eps)).astype(x.dtype)

    def backward(g):
        gmean = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return ((g - gmean - y * gy) / std,)

    return _make(y, (a,), backward, "layer_norm")


def softmax(a):
    """Per-row softmax, max-subtracted."""
    _ensure_finite(a.data, "softmax(input)")
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)

    def backward(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (a,), backward, "softmax")


def log_softmax(a):
    _ensure_finite(a.data, "log_softmax(input)")
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True, dtype=np.float64)).astype(x.dtype)
    out = shifted - lse

    def backward(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


_NORM_EPS = 1e-8


def l2_normalize(a):
    """Per-row unit normalization; rows with norm below 1e-8 map to zero."""
    x = a.data
    norm = np.sqrt(np.square(x.astype(np.float64)).sum(axis=-1, keepdims=True)).astype(x.dtype)
    ok = norm >= _NORM_EPS
    safe = np.where(ok, norm, 1.0)
    y = np.where(ok, x / safe, 0.0).astype(x.dtype)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(ok, (g - y * dot) / safe, 0.0),)

    return _make(y, (a,), backward, "l2_normalize")


def cosine_similarity(a, b):
    """Row-wise cosine between matching rows of ``a`` and ``b``."""
    return rsum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


def rsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(rsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def log(a):
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(out, (a,), backward, "log")


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def absolute(a):
    out = np.abs(a.data)

    def backward(g):
        return (g * np.sign(a.data),)

    return _make(out, (a,), backward, "abs")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: empty input list")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.squeeze(piece, axis=axis)
                     for piece in np.split(g, len(tensors), axis=axis))

    return _make(out, tuple(tensors), backward, "stack")


def transpose_last2(a):
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2: rank {a.ndim} < 2")
    out = np.swapaxes(a.data, -1, -2)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(out.copy(), (a,), backward, "transpose")


def reshape(a, shape):
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out.copy(), (a,), backward, "reshape")


def slice_axis(a, axis, start, stop):
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out.copy(), (a,), backward, "slice")


def dot(a, b):
    """Inner product of two same-shape tensors (full contraction)."""
    return rsum(mul(a, b))
