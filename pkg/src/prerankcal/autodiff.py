"""Reverse-mode differentiation over numpy arrays.

A :class:`Var` wraps an array. Operations on Vars created while a
:class:`Tape` is active are appended to it; since a node is recorded only
after its parents, creation order is already a topological order and a
single reverse pass produces every gradient.

The module-level functions (``exp``, ``log``, ``softplus`` ...) accept plain
arrays too and then return plain arrays, so model code runs unchanged with or
without gradient tracking.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field

import numpy as np


class AutodiffError(ArithmeticError):
    pass


class UnregisteredPrimitive(AutodiffError):
    pass


class NonFiniteValue(AutodiffError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def record(self, var: "Var") -> None:
        var._index = len(self.nodes)
        self.nodes.append(var)

    def backward(self, out: "Var") -> None:
        if out.value.size != 1:
            raise AutodiffError("backward needs a scalar output")
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes[: out._index + 1]):
            if node.grad is None or node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not isinstance(parent, Var):
                    continue
                g = _unbroadcast(g, parent.value.shape)
                parent.grad = g if parent.grad is None else parent.grad + g


class Var:
    __slots__ = ("value", "grad", "_parents", "_backward", "_index", "op")
    __array_priority__ = 1000

    def __init__(self, value, parents=(), backward=None, op="leaf"):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self._index = -1
        self.op = op

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # numpy interop: arithmetic ufuncs dispatch back to the tape, anything
    # else would silently drop gradients
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs and ufunc in _UFUNC_MAP:
            return _UFUNC_MAP[ufunc](*inputs)
        raise UnregisteredPrimitive(f"numpy ufunc {ufunc.__name__}.{method} is not a registered primitive")

    def __array_function__(self, func, types, args, kwargs):
        raise UnregisteredPrimitive(f"numpy function {func.__name__} is not a registered primitive")

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, k): return power(self, k)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _emit(out: np.ndarray, parents: tuple, backward, op: str):
    if not any(isinstance(p, Var) for p in parents):
        return out
    if not np.all(np.isfinite(out)):
        raise NonFiniteValue(f"non-finite value produced by {op}")
    var = Var(out, parents, backward, op)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(var)
    return var


# ---------------------------------------------------------------- primitives

def add(a, b):
    return _emit(value(a) + value(b), (a, b), lambda g: (g, g), "add")


def sub(a, b):
    return _emit(value(a) - value(b), (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    av, bv = value(a), value(b)
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _emit(out, (a, b), lambda g: (g / bv, -g * out / bv), "div")


def power(a, k):
    if isinstance(k, Var):
        raise UnregisteredPrimitive("power with a traced exponent")
    av = value(a)
    k = float(k)
    return _emit(av ** k, (a,), lambda g: (g * k * av ** (k - 1.0),), "power")


def exp(a):
    out = np.exp(value(a))
    return _emit(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    av = value(a)
    return _emit(np.log(av), (a,), lambda g: (g / av,), "log")


def sqrt(a):
    out = np.sqrt(value(a))
    return _emit(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def tanh(a):
    out = np.tanh(value(a))
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    av = value(a)
    return _emit(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),), "relu")


def abs_(a):
    av = value(a)
    return _emit(np.abs(av), (a,), lambda g: (g * np.sign(av),), "abs")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(np.atleast_1d(value(a))).reshape(np.shape(value(a)))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    av = value(a)
    out = np.logaddexp(0.0, av)
    return _emit(out, (a,), lambda g: (g * _sigmoid(np.atleast_1d(av)).reshape(av.shape),), "softplus")


def logsumexp(a, axis=-1, keepdims=False):
    av = value(a)
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(av - m), axis=axis, keepdims=True)
    out_k = np.log(s) + m
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(av - out_k),)

    return _emit(out, (a,), back, "logsumexp")


def log_softmax(a, axis=-1):
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def sum_(a, axis=None, keepdims=False):
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _emit(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[ax] for ax in np.atleast_1d(axis)])
    return div(sum_(a, axis, keepdims), float(n))


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise AutodiffError("matmul needs operands with ndim >= 2; use matvec for vectors")

    def back(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _emit(av @ bv, (a, b), back, "matmul")


def matvec(a, x):
    """``a @ x`` for matrices ``(..., m, n)`` and vectors ``(..., n)``."""
    av, xv = value(a), value(x)
    out = (av @ xv[..., None])[..., 0]

    def back(g):
        return g[..., :, None] * xv[..., None, :], (np.swapaxes(av, -1, -2) @ g[..., None])[..., 0]

    return _emit(out, (a, x), back, "matvec")


def inv_lower(a):
    """Inverse of lower-triangular matrices ``(..., D, D)``."""
    av = value(a)
    out = np.linalg.inv(av)
    out = np.tril(out)

    def back(g):
        gt = -np.swapaxes(out, -1, -2) @ g @ np.swapaxes(out, -1, -2)
        return (np.tril(gt),)

    return _emit(out, (a,), back, "inv_lower")


def getitem(a, idx):
    av = value(a)
    out = av[idx]

    def back(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(np.array(out, dtype=float), (a,), back, "getitem")


def reshape(a, shape):
    av = value(a)
    return _emit(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),), "reshape")


def swapaxes(a, ax1, ax2):
    av = value(a)
    return _emit(np.swapaxes(av, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def stop_gradient(a):
    return value(a).copy()


_UFUNC_MAP = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.matmul: matmul,
}

PRIMITIVES = (
    "add", "sub", "mul", "div", "power", "exp", "log", "sqrt", "tanh", "relu", "abs",
    "sigmoid", "softplus", "logsumexp", "sum", "matmul", "matvec", "inv_lower",
    "getitem", "reshape", "swapaxes",
)


# ------------------------------------------------------------ parameters

class ParamVector:
    """Flat float64 parameter vector with named, shaped segments."""

    def __init__(self, values, segments):
        self.values = np.asarray(values, dtype=float)
        self.segments = dict(segments)
        end = 0
        for name, (offset, shape) in self.segments.items():
            if offset != end:
                raise ValueError(f"segment {name} does not start where the previous one ended")
            end = offset + int(np.prod(shape))
        if end != self.values.size:
            raise ValueError(f"segments cover {end} entries, vector has {self.values.size}")

    @classmethod
    def from_shapes(cls, shapes, values=None):
        segments, off = {}, 0
        for name, shape in shapes:
            shape = tuple(shape)
            segments[name] = (off, shape)
            off += int(np.prod(shape))
        if values is None:
            values = np.zeros(off)
        return cls(values, segments)

    def __len__(self):
        return self.values.size

    def copy(self, values=None):
        return ParamVector(self.values.copy() if values is None else values, self.segments)

    def unpack(self, flat=None) -> dict:
        """Slice ``flat`` (defaults to the stored values) into named segments."""
        flat = self.values if flat is None else flat
        out = {}
        for name, (offset, shape) in self.segments.items():
            n = int(np.prod(shape))
            out[name] = reshape(getitem(flat, slice(offset, offset + n)), shape)
        return out


def value_and_grad(loss, at):
    """Evaluate ``loss(Var)`` and its gradient at ``at`` (ParamVector or array)."""
    theta = at.values if isinstance(at, ParamVector) else np.asarray(at, dtype=float)
    tape = Tape()
    token = _ACTIVE_TAPE.set(tape)
    try:
        leaf = Var(theta.copy())
        tape.record(leaf)
        out = loss(leaf)
        if not isinstance(out, Var):
            return float(np.asarray(out).reshape(())), np.zeros_like(theta)
        tape.backward(out)
    finally:
        _ACTIVE_TAPE.reset(token)
    g = leaf.grad if leaf.grad is not None else np.zeros_like(theta)
    return float(out.value.reshape(())), g


def grad(loss, at):
    return value_and_grad(loss, at)[1]


def check_gradient(loss, at, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8)."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("step h must lie in [1e-7, 1e-3]")
    theta = at.values if isinstance(at, ParamVector) else np.asarray(at, dtype=float)
    g = grad(loss, theta)
    fd = np.empty_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        fd[i] = (float(value(loss(tp))) - float(value(loss(tm)))) / (2.0 * h)
    return float(np.max(np.abs(g - fd) / (np.abs(g) + 1e-8)))
