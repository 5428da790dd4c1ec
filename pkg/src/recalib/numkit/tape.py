"""Reverse-mode gradient tape over numpy arrays.

Values are float64 numpy arrays wrapped in :class:`Tensor`. Operations only
record themselves while a :class:`Tape` is active (``with Tape() as tape:``);
outside a tape they are plain numpy computations with no bookkeeping, which is
what inference uses.
"""
from __future__ import annotations

import threading

import numpy as np

_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that can be tracked on a tape.

    ``requires_grad`` marks leaves we want adjoints for (parameters). Non-leaf
    tensors inherit it from their inputs.
    """

    __slots__ = ("value", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad=False, name=None):
        if isinstance(value, Tensor):
            value = value.value
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        from . import ops

        return ops.transpose(self)

    def numpy(self):
        return self.value

    def item(self):
        return float(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; every method defers to ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.take(self, index)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Records primitive operations and replays them backwards.

    A tape is single-owner: it must not be shared between threads that record
    concurrently. Nested tapes are allowed; only the innermost one records.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def gradient(self, target, sources):
        """Adjoints of scalar ``target`` with respect to each tensor in ``sources``.

        Sources that ``target`` does not depend on get zero arrays.
        """
        target = as_tensor(target)
        if target.value.size != 1:
            raise ValueError(f"gradient target must be scalar, got shape {target.shape}")
        adj = {id(target): np.ones_like(target.value)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
        out = []
        for s in sources:
            g = adj.get(id(s))
            out.append(np.zeros_like(s.value) if g is None else np.asarray(g, dtype=np.float64))
        return out


def record(value, inputs, vjp):
    """Wrap ``value`` as a Tensor and, if a tape is active, record how to pull back.

    ``vjp(g)`` must return one adjoint (or None) per input, shaped like that input.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=requires)
    if requires:
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(_Node(out, tuple(inputs), vjp))
    return out
