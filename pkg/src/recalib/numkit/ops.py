"""Differentiable primitives.

Every function takes Tensors (or array-likes) and returns a Tensor. All values
are float64. Broadcasting follows numpy; adjoints are summed back to the input
shape.
"""
from __future__ import annotations

import threading

import numpy as np

from ..errors import EvaluationError, ShapeError
from .tape import Tensor, as_tensor, record

EPS = 1e-8


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return record(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    """Plain quotient ``a / b``; see :func:`safe_div` for the guarded form."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / bv, av.shape),
                             _unbroadcast(-g * out / bv, bv.shape)))


def safe_div(a, b, eps=EPS):
    return div(a, add(b, eps))


def neg(a):
    a = as_tensor(a)
    return record(-a.value, (a,), lambda g: (-g,))


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return record(a.value * c, (a,), lambda g: (g * c,))


def square(a):
    a = as_tensor(a)
    av = a.value
    return record(av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a, eps=EPS):
    """``sqrt(a + eps)``; the radicand guard keeps the derivative finite at 0."""
    a = as_tensor(a)
    out = np.sqrt(a.value + eps)
    return record(out, (a,), lambda g: (0.5 * g / out,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return record(out, (a,), lambda g: (g * out,))


def log(a, eps=0.0):
    a = as_tensor(a)
    arg = a.value + eps
    return record(np.log(arg), (a,), lambda g: (g / arg,))


# --- nonlinearities ---------------------------------------------------------

def relu(a):
    a = as_tensor(a)
    mask = a.value > 0
    return record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.value)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a, axis=-1):
    a = as_tensor(a)
    if a.value.size == 0:
        raise ShapeError(f"softmax of empty array with shape {a.shape}")
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), vjp)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return record(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def softmax_rows(m):
    """Row-wise softmax of a 2-D matrix, stabilized by row-max subtraction."""
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError(f"softmax_rows needs a non-empty 2-D matrix, got shape {m.shape}")
    return softmax(m, axis=1)


def log_sigmoid(a):
    """``log(sigmoid(a))`` without overflow."""
    a = as_tensor(a)
    x = a.value
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid(x)
    return record(out, (a,), lambda g: (g * (1.0 - s),))


# --- linear algebra and shape -----------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return record(out, (a, b), vjp)


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    return record(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    return record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, index):
    """Basic or advanced indexing ``a[index]``."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return record(a.value[index], (a,), vjp)


def pad_time(a, before, after):
    """Zero-pad axis -2 (the time axis of a ``... x T x D`` tensor)."""
    a = as_tensor(a)
    t = a.shape[-2]
    widths = [(0, 0)] * (a.ndim - 2) + [(before, after), (0, 0)]
    out = np.pad(a.value, widths)
    return record(out, (a,), lambda g: (g[..., before:before + t, :],))


_held = threading.local()


class held_stops:
    """Pin every stop point to the value it had on the first pass.

    Inside the context, ``stop_gradient(a)`` returns its first-pass value and
    ``grad_reverse(a, s)`` returns ``first + (-s) * (a - first)``. Both agree
    with the plain ops at the first-pass point, but their derivative is now
    the one the tape propagates, so finite differences of the whole objective
    can be compared with tape gradients. Stop points are matched by call
    order; call :meth:`rewind` before each re-evaluation.
    """

    def __enter__(self):
        self.values, self.index, self.recording = [], 0, True
        _held.state = self
        return self

    def __exit__(self, *exc):
        _held.state = None

    def rewind(self):
        self.index, self.recording = 0, False

    def value(self, current, slope):
        if self.recording:
            self.values.append(current.copy())
            return current.copy()
        if self.index >= len(self.values):
            raise EvaluationError("objective made more stop-point calls than on its first pass")
        ref = self.values[self.index]
        self.index += 1
        if ref.shape != current.shape:
            raise EvaluationError(f"stop point {self.index - 1} changed shape: {ref.shape} vs {current.shape}")
        return ref + slope * (current - ref) if slope else ref.copy()


def _stop_value(a, slope):
    state = getattr(_held, "state", None)
    return a.value.copy() if state is None else state.value(a.value, slope)


def stop_gradient(a):
    """Identity in the forward pass; blocks every adjoint."""
    a = as_tensor(a)
    return Tensor(_stop_value(a, 0.0), requires_grad=False)


def grad_reverse(a, strength=1.0):
    """Identity forward, adjoint multiplied by ``-strength``."""
    a = as_tensor(a)
    s = float(strength)
    return record(_stop_value(a, -s), (a,), lambda g: (-s * g,))


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def maximum(a, floor):
    """Elementwise ``max(a, floor)`` for a constant floor; adjoint flows where a > floor."""
    a = as_tensor(a)
    mask = a.value > floor
    return record(np.where(mask, a.value, floor), (a,), lambda g: (g * mask,))


def logdet(a):
    """Log-determinant of a symmetric positive-definite matrix (last two axes)."""
    a = as_tensor(a)
    chol = np.linalg.cholesky(a.value)
    out = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    inv = np.linalg.inv(a.value)
    return record(out, (a,), lambda g: (np.asarray(g)[..., None, None] * np.swapaxes(inv, -1, -2),))


def logsumexp(a, axis=-1):
    a = as_tensor(a)
    mx = a.value.max(axis=axis, keepdims=True)
    s = np.exp(a.value - mx)
    tot = s.sum(axis=axis, keepdims=True)
    out = (np.log(tot) + mx).squeeze(axis)
    sm = s / tot
    return record(out, (a,), lambda g: (np.expand_dims(g, axis) * sm,))
