"""Dense float64 tensors with reverse-mode automatic differentiation.

Each differentiable op records its parents and a closure mapping the output
gradient to parent gradients. ``backward`` sweeps the recorded graph in
reverse topological order, accumulating gradients additively across fan-out,
and then frees the graph.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
is a scalar, or one is a vector matching the other's trailing axis. Anything
else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a graph (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d arrays to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.shape[0]

    # arithmetic
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _broadcast_shape(a, b):
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(b) == 1 and len(a) >= 2 and a[-1] == b[0]:
        return a
    if len(a) == 1 and len(b) >= 2 and b[-1] == a[0]:
        return b
    raise ShapeError(f"cannot broadcast shapes {a} and {b}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


# elementwise binary ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _result(ad / bd, (a, b), backward)


# elementwise unary ops

def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,))


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def gelu(x):
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF."""
    x = as_tensor(x)
    xd = x.data
    return _result(kernels.gelu_forward(xd), (x,), lambda g: (kernels.gelu_backward(xd, g),))


def softplus(x):
    x = as_tensor(x)
    xd = x.data
    return _result(kernels.softplus_forward(xd), (x,), lambda g: (kernels.softplus_backward(xd, g),))


# reductions and shape ops

def tsum(x, axis=None):
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))
    axis = axis % x.ndim
    return _result(
        x.data.sum(axis=axis), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),)
    )


def mean(x, axis=None):
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return tsum(x, axis) * (1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x):
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _result(x.data.T, (x,), lambda g: (g.T,))


def getitem(x, index):
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def tile_rows(v, n):
    """Stack ``n`` copies of vector ``v`` into an ``n x len(v)`` matrix."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"tile_rows expects a vector, got shape {v.shape}")
    return _result(np.tile(v.data, (n, 1)), (v,), lambda g: (g.sum(axis=0),))


def matmul(a, b):
    """Matrix product of ``m x k`` and ``k x n``; a length-``k`` vector may stand in for ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if a.ndim == 1:
        return _result(ad @ bd, (a, b), lambda g: (bd @ g, np.outer(ad, g)))
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else out + bias


# normalisation and attention

def softmax(x, axis=-1):
    x = as_tensor(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    axis %= x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    flat_shape = moved.shape
    y = kernels.softmax_forward(np.ascontiguousarray(moved.reshape(-1, flat_shape[-1])))

    def backward(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(-1, flat_shape[-1]))
        gx = kernels.softmax_backward(y, gm).reshape(flat_shape)
        return (np.moveaxis(gx, -1, axis),)

    return _result(np.moveaxis(y.reshape(flat_shape), -1, axis), (x,), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match width {width}")
    shape = x.shape
    x2 = x.data.reshape(-1, width)
    y, xhat, rstd = kernels.layer_norm_forward(x2, gain.data, bias.data, float(eps))
    gd = gain.data

    def backward(g):
        gx, ggain, gbias = kernels.layer_norm_backward(
            np.ascontiguousarray(g.reshape(-1, width)), xhat, rstd, gd
        )
        return gx.reshape(shape), ggain, gbias

    return _result(y.reshape(shape), (x, gain, bias), backward)


def attention(q, k, v, n_heads=1):
    """Multi-head scaled dot-product attention on column-split heads.

    ``q`` is ``nq x d``; ``k`` and ``v`` are ``n x d``. Heads see contiguous
    column blocks of width ``d / n_heads``; their outputs are concatenated.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.ndim != 2 or v.ndim != 2 or q.ndim != 2:
        raise ShapeError(f"attention expects matrices, got {q.shape}, {k.shape}, {v.shape}")
    if k.shape[0] == 0 or v.shape[0] == 0:
        raise ContractError("attention requires ≥1 context")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"keys {k.shape} and values {v.shape} differ in row count")
    if not (q.shape[1] == k.shape[1] == v.shape[1]):
        raise ShapeError(f"attention widths differ: {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] % n_heads:
        raise ShapeError(f"width {q.shape[1]} not divisible by {n_heads} heads")
    qd, kd, vd = q.data, k.data, v.data
    out, weights = kernels.attention_forward(qd, kd, vd, int(n_heads))

    def backward(g):
        return kernels.attention_backward(qd, kd, vd, weights, np.ascontiguousarray(g), int(n_heads))

    return _result(out, (q, k, v), backward)


# differentiation

def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers of leaf tensors; the
    recorded graph is released afterwards.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape")
    order = _topological_order(loss)
    grads = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        node._parents = ()
        node._backward = None


def grad_check(f, x, h=1e-5):
    """Max relative error between backprop and central differences.

    ``x`` is a tensor or a sequence of tensors; ``f(*xs)`` must return a
    scalar tensor and be deterministic. The relative error per element is
    ``|a - n| / (|a| + |n| + 1e-8)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved_flags = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        loss = f(*xs)
        backward(loss)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]
        worst = 0.0
        with no_grad():
            for t, a in zip(xs, analytic):
                flat = t.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = float(f(*xs).data)
                    flat[i] = orig - h
                    fm = float(f(*xs).data)
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * h)
                    ai = a.reshape(-1)[i]
                    err = abs(ai - num) / (abs(ai) + abs(num) + 1e-8)
                    worst = max(worst, err)
    finally:
        for t, flag in zip(xs, saved_flags):
            t.requires_grad = flag
            t.grad = None
    return worst
