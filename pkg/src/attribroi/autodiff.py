"""Reverse-mode automatic differentiation over dense float64 arrays.

Every primitive computes its forward value with numpy and registers a closure
mapping the output gradient to one gradient per parent. ``Tensor.backward``
orders the recorded graph topologically and replays those closures in
reverse.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

from .exceptions import ContractError, NumericDomainError, ShapeError

EPS_CLAMP = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)
_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (per thread)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data):
    return np.array(data, dtype=np.float64)


class Tensor:
    """A float64 array that optionally tracks gradients.

    Leaves created with ``requires_grad=True`` start with a zero gradient
    buffer that ``backward`` accumulates into. Non-leaf tensors receive the
    gradient of the most recent backward pass, which is how Grad-CAM reads
    the gradient at an intermediate activation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = _as_array(data)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self.name = name

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        out.grad = None
        out.name = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    def backward(self):
        """Propagate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents:
                node.grad = g
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            else:
                node.grad = g.copy() if node.grad is None else node.grad + g

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def zero_grad(tensors):
    for t in tensors:
        t.zero_grad()


# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b):
    if not isinstance(b, Tensor) and np.isscalar(b):
        return scale(a, b)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def div(a, b):
    """Elementwise ``a / b``; denominators with magnitude below 1e-12 are clamped."""
    a, b = as_tensor(a), as_tensor(b)
    small = np.abs(b.data) < EPS_CLAMP
    denom = np.where(small, np.where(b.data < 0, -EPS_CLAMP, EPS_CLAMP), b.data)
    out = a.data / denom

    def backward(g):
        ga = _unbroadcast(g / denom, a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.where(small, 0.0, -g * out / denom)
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def log(a):
    """Natural log with inputs clamped below at 1e-12."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, EPS_CLAMP)

    def backward(g):
        return (np.where(a.data < EPS_CLAMP, 0.0, g / clamped),)

    return Tensor._from_op(np.log(clamped), (a,), backward)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a):
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

    return Tensor._from_op(out, (a,), backward)


# reductions and shape ops

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a, ax1, ax2):
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, index):
    """Gather/slice with numpy indexing semantics."""
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    out = a.data[index]
    basic = not any(isinstance(i, (list, np.ndarray)) for i in
                    (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# linear algebra

def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# normalisation and probability

def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NumericDomainError("input contains NaN or Inf")


def softmax(a, axis=-1):
    a = as_tensor(a)
    _check_finite(a.data)
    # in place on the fresh shifted copy; attention scores are the largest arrays here
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    _check_finite(a.data)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), backward)


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalise over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def backward(g):
        dx = inv / n * (n * g - g.sum(axis=-1, keepdims=True)
                        - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (dx,)

    out = Tensor._from_op(xhat, (x,), backward)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


# resampling

def bilinear_matrix(n_in, n_out):
    """Interpolation weights (n_out, n_in) with half-pixel centres and edge clamping."""
    m = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(a, out_h, out_w):
    """Bilinear resize of the last two axes to ``(out_h, out_w)``."""
    a = as_tensor(a)
    mh = bilinear_matrix(a.shape[-2], out_h)
    mw = bilinear_matrix(a.shape[-1], out_w)
    out = mh @ a.data @ mw.T
    return Tensor._from_op(out, (a,), lambda g: (mh.T @ g @ mw,))


# numerical checking

def numerical_gradient(f, point, step=1e-6):
    """Central-difference gradient of scalar ``f`` at ``point`` (ndarray)."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(Tensor(x)).data)
        flat[i] = orig - step
        down = float(f(Tensor(x)).data)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def grad_check(f, point, step=1e-6):
    """Max over coordinates of ``|autodiff - central difference| / max(1, |central difference|)``."""
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    out = f(x)
    if out.requires_grad:
        out.backward()
        auto = x.grad
    else:
        auto = np.zeros_like(base)
    numeric = numerical_gradient(f, base, step)
    err = np.abs(auto - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
