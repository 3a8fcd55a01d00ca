"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus an optional gradient slot and a
backward closure linking it to its inputs. Calling :func:`backward` on a
scalar loss walks the recorded graph in reverse topological order and
accumulates d(loss)/d(x) into every reachable tensor's ``grad``.

The op set is deliberately small: matmul, add/sub/mul/div, concat, slicing,
sum/mean, relu, softplus, sigmoid, sin, cos, exp, log, square, broadcasting,
plus a first-axis gather and an im2col conv2d for the image encoder.
Anything else is composed from these.

Tapes are single-threaded units of work; nothing here is shared mutable
state, so independent graphs may be evaluated concurrently.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import ContractError, NumericError, ShapeError

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype):
    _state.dtype = np.dtype(dtype).type


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default float dtype (e.g. float64 for gradient checks)."""
    prev = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Skip tape construction entirely; forward passes become plain numpy."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _asarray(data, dtype=None):
    # ndarrays and numpy scalars (reduction outputs) keep their float dtype;
    # python scalars and lists follow the default, so python-float constants
    # never upcast a float32 graph to float64.
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    if isinstance(data, np.floating) and data.dtype in (np.float32, np.float64):
        return np.asarray(data)
    return np.asarray(data, dtype=dtype or default_dtype())


class Tensor:
    """A numpy-backed value participating in the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = _asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic introspection -------------------------------------------------

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

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = " grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    def _tracked(self):
        return self.requires_grad or self._parents

    # -- gradient bookkeeping --------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(astensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tensor_slice(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data, name=None):
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name=None):
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _make(data, parents, backward_fn):
    """Create an op output; skip tape bookkeeping when no input is tracked."""
    if grad_enabled() and any(p._tracked() for p in parents):
        return Tensor(data, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic ------------------------------------------------------------------


def add(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out_data, (a, b), backward_fn)


def sub(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out_data, (a, b), backward_fn)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data * b.data

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out_data, (a, b), backward_fn)


def div(a, b):
    a, b = astensor(a), astensor(b)
    out_data = a.data / b.data

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out_data, (a, b), backward_fn)


def neg(a):
    a = astensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2:
        raise ShapeError(f"matmul supports 1D/2D @ 2D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g):
        if a.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    return _make(out_data, (a, b), backward_fn)


def transpose(a):
    a = astensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2D tensor, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape):
    a = astensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    a = astensor(a)
    out_data = np.broadcast_to(a.data, shape)

    def backward_fn(g):
        return (_unbroadcast(g, a.shape),)

    return _make(np.ascontiguousarray(out_data), (a,), backward_fn)


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat requires at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        index = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            index[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(index)])
        return tuple(grads)

    return _make(out_data, tensors, backward_fn)


def _has_index_array(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def tensor_slice(a, key):
    a = astensor(a)
    out_data = a.data[key]
    fancy = _has_index_array(key)  # duplicate indices need scatter-add

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        if fancy:
            np.add.at(ga, key, g)
        else:
            ga[key] = g
        return (ga,)

    return _make(np.ascontiguousarray(out_data), (a,), backward_fn)


def gather(a, idx):
    """First-axis gather: out[i...] = a[idx[i...]]; backward scatter-adds."""
    a = astensor(a)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather indices must be integers")
    out_data = a.data[idx]

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out_data, (a,), backward_fn)


# -- reductions ----------------------------------------------------------------


def tensor_sum(a, axis=None, keepdims=False):
    a = astensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out_data, (a,), backward_fn)


def tensor_mean(a, axis=None, keepdims=False):
    a = astensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    # reciprocal in the input's dtype so the mean never changes precision
    return tensor_sum(a, axis=axis, keepdims=keepdims) * np.asarray(1.0 / n, dtype=a.data.dtype)


# -- elementwise nonlinearities ---------------------------------------------------


def relu(a):
    a = astensor(a)
    out_data = np.maximum(a.data, 0)
    return _make(out_data, (a,), lambda g: (g * (a.data > 0),))


def softplus(a):
    a = astensor(a)
    out_data = np.logaddexp(0, a.data).astype(a.dtype)

    def backward_fn(g):
        return (g * _sigmoid(a.data),)

    return _make(out_data, (a,), backward_fn)


def _sigmoid(x):
    # tanh form is overflow-safe for both signs
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a):
    a = astensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def sin(a):
    a = astensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a):
    a = astensor(a)
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def exp(a):
    a = astensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a):
    a = astensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    a = astensor(a)
    return _make(a.data * a.data, (a,), lambda g: (g * 2.0 * a.data,))


# -- conv2d (im2col) --------------------------------------------------------------


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def conv2d(x, weight, bias, stride=1, pad=1):
    """2D convolution, NCHW input, OIHW weights. Backward uses col2im scatter."""
    x, weight, bias = astensor(x), astensor(weight), astensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    b, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, pad)
    wmat = weight.data.reshape(o, c * kh * kw)
    out = cols @ wmat.T + bias.data
    out_data = out.reshape(b, oh, ow, o).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gb = gmat.sum(axis=0)
        gcols = gmat @ wmat  # (b*oh*ow, c*kh*kw)
        gx_pad = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        gwin = gcols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        for i in range(kh):
            for j in range(kw):
                gx_pad[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += gwin[
                    :, :, :, :, i, j
                ]
        gx = gx_pad[:, :, pad : pad + h, pad : pad + w] if pad else gx_pad
        return gx, gw, gb

    return _make(out_data, (x, weight, bias), backward_fn)


# -- backward pass ------------------------------------------------------------------


def _toposort(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Accumulate d(loss)/dx into grad slots of every tensor reachable from ``loss``.

    ``params`` optionally names tensors whose grad should be zero-initialized
    even when unreachable from the loss.
    """
    if loss.ndim != 0 and loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("backward called on a non-finite loss")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            parent.accumulate_grad(g)
