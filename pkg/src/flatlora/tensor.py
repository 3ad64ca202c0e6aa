"""Dense float64 tensors with reverse-mode autodiff.

Each op returns a new :class:`Tensor`; inputs are never mutated. An op output
remembers its parents and a closure mapping the upstream gradient to one
gradient per parent. :func:`backward` walks the graph once in reverse
topological order. Leaf gradients accumulate across calls; intermediate
gradients are kept only on nodes that asked for them via ``retain_grad``.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NonFiniteError

LN_EPS = 1e-5
CHECK_FINITE = True

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op",
                 "_parents", "_backward", "_retain", "delta")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._retain = False
        # additive offset used by perturbation/probing code; never part of data
        self.delta = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def retain_grad(self):
        self._retain = True
        return self

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out._retain = False
    out.delta = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), bw, "gelu")


def add_bias(x, b):
    """x[..., n] + b[n], the one broadcast this engine supports."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} + {b.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product; batched when both operands share leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _result(ad @ bd, (a, b), bw, "matmul")


def transpose(a, axes=None):
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes).copy(), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- reductions

def sum(a):  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    shp = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shp, float(g)),), "sum")


def mean(a, axis=None):
    a = _as_tensor(a)
    shp = a.shape
    if axis is None:
        n = a.data.size
        return _result(np.array(a.data.mean()), (a,), lambda g: (np.full(shp, float(g) / n),), "mean")
    n = shp[axis]
    return _result(a.data.mean(axis=axis), (a,),
                   lambda g: (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,), "mean")


# ---------------------------------------------------------------- normalisation / probabilities

def layernorm(x, gain, bias, eps=LN_EPS):
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1] if x.data.ndim else 0
    if n == 0:
        raise DimensionError("layernorm over an empty last dimension")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layernorm: gain/bias must have shape ({n},)")
    shp = x.shape
    rows = x.data.reshape(-1, n)
    xhat, rstd = kernels.layernorm_fwd(rows, eps)
    gd = gain.data
    out = (xhat * gd + bias.data).reshape(shp)

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = kernels.layernorm_bwd(g2 * gd, xhat, rstd).reshape(shp)
        return (gx, (g2 * xhat).sum(axis=0), g2.sum(axis=0))

    return _result(out, (x, gain, bias), bw, "layernorm")


def softmax(x):
    """Softmax over the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be (batch, classes), got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise DimensionError(f"expected {b} labels, got shape {labels.shape}")
    if b and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, labels]))

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / b),)

    return _result(np.array(loss), (logits,), bw, "softmax_cross_entropy")


def embedding(table, idx):
    """Rows of ``table`` gathered at integer ``idx`` (any shape)."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError("embedding index out of range")
    shp = table.shape

    def bw(g):
        gt = np.zeros(shp)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, shp[1]))
        return (gt,)

    return _result(table.data[idx], (table,), bw, "embedding")


# ---------------------------------------------------------------- backward

def _topo(root):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate gradients of scalar ``loss``; returns the number of nodes visited."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    order = _topo(loss)
    grads = {id(loss): np.ones(())}
    visits = 0
    for node in reversed(order):
        visits += 1
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._retain:
            node.grad = g.copy()
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return visits
