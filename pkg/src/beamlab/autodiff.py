"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Each :class:`Value` records the closure that pushes its gradient back to its
parents.  :meth:`Tape.backward` replays the tape in exact reverse order, so
fan-out accumulates additively and leaves outside the root's dependency cone
end with an all-zero gradient.

Broadcasting follows numpy; gradients are summed back to each parent's shape.
"""
from __future__ import annotations

import numpy as np


class TapeError(ValueError):
    pass


class Tape:
    def __init__(self):
        self.nodes: list[Value] = []

    def _record(self, data, parents=(), backward=None) -> "Value":
        v = Value(self, data, parents, backward)
        self.nodes.append(v)
        return v

    def leaf(self, data) -> "Value":
        """A differentiable input (parameter or observed quantity)."""
        return self._record(np.array(data, dtype=float))

    def const(self, data) -> "Value":
        return self._record(np.asarray(data, dtype=float))

    def lift(self, x) -> "Value":
        if isinstance(x, Value):
            if x.tape is not self:
                raise TapeError("values from different tapes cannot be mixed")
            return x
        return self.const(x)

    def backward(self, root: "Value") -> None:
        if root.tape is not self:
            raise TapeError("root belongs to a different tape")
        if root.data.size != 1:
            raise TapeError(f"backward() needs a scalar root, got shape {root.data.shape}")
        for v in self.nodes:
            v.grad = np.zeros_like(v.data)
        root.grad = np.ones_like(root.data)
        for v in reversed(self.nodes):
            if v._backward is not None:
                v._backward(v.grad)


class Value:
    __slots__ = ("tape", "data", "grad", "parents", "_backward")

    def __init__(self, tape, data, parents=(), backward=None):
        self.tape = tape
        self.data = data
        self.grad = None
        self.parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self, tape=self.tape)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self, tape=self.tape)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)


def _tape_of(*xs, tape=None) -> Tape:
    for x in xs:
        if isinstance(x, Value):
            if tape is not None and x.tape is not tape:
                raise TapeError("values from different tapes cannot be mixed")
            tape = x.tape
    if tape is None:
        raise TapeError("at least one operand must be a Value")
    return tape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _unary(x: Value, out, dfdx):
    """Record ``out = f(x)`` with elementwise local derivative ``dfdx``."""

    def back(g):
        x.grad += g * dfdx

    return x.tape._record(out, (x,), back)


def add(a, b, tape=None):
    t = _tape_of(a, b, tape=tape)
    a, b = t.lift(a), t.lift(b)

    def back(g):
        a.grad += _unbroadcast(g, a.data.shape)
        b.grad += _unbroadcast(g, b.data.shape)

    return t._record(a.data + b.data, (a, b), back)


bias_add = add


def sub(a, b, tape=None):
    t = _tape_of(a, b, tape=tape)
    a, b = t.lift(a), t.lift(b)

    def back(g):
        a.grad += _unbroadcast(g, a.data.shape)
        b.grad -= _unbroadcast(g, b.data.shape)

    return t._record(a.data - b.data, (a, b), back)


def neg(a: Value):
    return _unary(a, -a.data, -1.0)


def mul(a, b, tape=None):
    t = _tape_of(a, b, tape=tape)
    a, b = t.lift(a), t.lift(b)

    def back(g):
        a.grad += _unbroadcast(g * b.data, a.data.shape)
        b.grad += _unbroadcast(g * a.data, b.data.shape)

    return t._record(a.data * b.data, (a, b), back)


def div(a, b, tape=None):
    t = _tape_of(a, b, tape=tape)
    a, b = t.lift(a), t.lift(b)
    out = a.data / b.data

    def back(g):
        a.grad += _unbroadcast(g / b.data, a.data.shape)
        b.grad -= _unbroadcast(g * out / b.data, b.data.shape)

    return t._record(out, (a, b), back)


def scalar_div(a: Value, c: float):
    return _unary(a, a.data / c, 1.0 / c)


def matvec(w: Value, x: Value):
    """``w @ x`` for a vector ``x``, or row-wise ``x @ w.T`` for a batch ``x``."""
    t = _tape_of(w, x)
    w, x = t.lift(w), t.lift(x)
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[1]:
        raise ValueError(f"matvec shape mismatch: {w.data.shape} @ {x.data.shape}")

    def back(g):
        if x.data.ndim == 1:
            w.grad += np.outer(g, x.data)
        else:
            w.grad += g.T @ x.data
        x.grad += g @ w.data

    return t._record(x.data @ w.data.T, (w, x), back)


def relu(x: Value):
    # relu'(0) = 0
    return _unary(x, np.maximum(x.data, 0.0), (x.data > 0).astype(float))


def _sigmoid(z):
    # split form: exp() only ever sees nonpositive arguments
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic(x: Value):
    s = _sigmoid(x.data)
    return _unary(x, s, s * (1.0 - s))


def log_logistic(x: Value):
    """log(sigmoid(x)) = -softplus(-x), finite for every finite x."""
    z = x.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _unary(x, out, _sigmoid(-z))


def exp(x: Value):
    out = np.exp(x.data)
    return _unary(x, out, out)


def log(x: Value):
    return _unary(x, np.log(x.data), 1.0 / x.data)


def sqrt(x: Value):
    out = np.sqrt(x.data)
    return _unary(x, out, 0.5 / out)


def sin(x: Value):
    return _unary(x, np.sin(x.data), np.cos(x.data))


def cos(x: Value):
    return _unary(x, np.cos(x.data), -np.sin(x.data))


def square(x: Value):
    return _unary(x, x.data * x.data, 2.0 * x.data)


def abs_pow(x: Value, n: float):
    """``|x|**n`` with derivative ``n*|x|**(n-1)*sign(x)`` (zero at x == 0)."""
    ax = np.abs(x.data)
    if n == 1:
        d = np.sign(x.data)
    else:
        d = n * ax ** (n - 1) * np.sign(x.data)
    return _unary(x, ax ** n, d)


def maximum(x: Value, floor: float):
    """Elementwise ``max(x, floor)``; no gradient flows where the floor binds."""
    return _unary(x, np.maximum(x.data, floor), (x.data > floor).astype(float))


def atan2(y, x, eps: float = 0.0):
    """Angle of (x, y); ``eps`` is added to x^2 + y^2 in the derivative."""
    t = _tape_of(y, x)
    y, x = t.lift(y), t.lift(x)
    r2 = x.data * x.data + y.data * y.data + eps

    def back(g):
        y.grad += _unbroadcast(g * x.data / r2, y.data.shape)
        x.grad -= _unbroadcast(g * y.data / r2, x.data.shape)

    return t._record(np.arctan2(y.data, x.data), (y, x), back)


def sum(x: Value, axis=None):
    out = np.sum(x.data, axis=axis)

    def back(g):
        if axis is None:
            x.grad += np.broadcast_to(g, x.data.shape)
        else:
            x.grad += np.broadcast_to(np.expand_dims(g, axis), x.data.shape)

    return x.tape._record(np.asarray(out), (x,), back)


def mean(x: Value, axis=None):
    n = x.data.size if axis is None else x.data.shape[axis]
    return scalar_div(sum(x, axis=axis), n)


def weighted_sum(w, v, axis=-1):
    """``sum(w * v)`` along ``axis`` (broadcasting ``w`` against ``v``)."""
    return sum(mul(w, v), axis=axis)


def log_sum_exp(x: Value, axis=-1):
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def back(g):
        x.grad += np.expand_dims(g, axis) * soft

    return x.tape._record(out, (x,), back)


def softmax_normalize(logw: Value, axis=-1):
    """Probabilities proportional to ``exp(logw)`` along ``axis``."""
    m = np.max(logw.data, axis=axis, keepdims=True)
    e = np.exp(logw.data - m)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        logw.grad += p * (g - np.sum(g * p, axis=axis, keepdims=True))

    return logw.tape._record(p, (logw,), back)


def take(x: Value, idx):
    """Basic or advanced indexing, ``x[idx]``."""
    out = x.data[idx]

    def back(g):
        np.add.at(x.grad, idx, g)

    return x.tape._record(np.array(out, dtype=float), (x,), back)


def clip_grad_rows(x: Value, max_norm: float):
    """Identity forward; backward rescales each row of the incoming gradient
    (last axis) to Euclidean norm at most ``max_norm``.  ``max_norm=0`` stops
    the gradient entirely."""

    def back(g):
        if max_norm == 0:
            return
        norm = np.sqrt(np.sum(g * g, axis=-1, keepdims=True))
        x.grad += g * np.minimum(1.0, max_norm / np.maximum(norm, 1e-300))

    return x.tape._record(x.data, (x,), back)


def reshape(x: Value, shape):
    def back(g):
        x.grad += g.reshape(x.data.shape)

    return x.tape._record(x.data.reshape(shape), (x,), back)
