"""Parameter containers, initializers and the Adam optimizer."""
from __future__ import annotations

import numpy as np

from . import ops
from .tape import Tensor


def xavier_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Module:
    """Base class: parameters are Tensor attributes, submodules are Module attributes."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield from v.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = flag
        return self


class Linear(Module):
    def __init__(self, rng, n_in, n_out, bias=True, zero=False):
        w = np.zeros((n_in, n_out)) if zero else xavier_uniform(rng, n_in, n_out)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def named_parameters(self, prefix=""):
        yield prefix + "weight", self.weight
        if self.bias is not None:
            yield prefix + "bias", self.bias

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class MLP(Module):
    """Two-layer perceptron with a ReLU hidden layer and linear output."""

    def __init__(self, rng, n_in, n_hidden, n_out, zero=False):
        self.fc1 = Linear(rng, n_in, n_hidden, zero=zero)
        self.fc2 = Linear(rng, n_hidden, n_out, zero=zero)

    def __call__(self, x):
        return self.fc2(ops.relu(self.fc1(x)))


class Adam:
    """Moment-based adaptive step on a fixed list of parameters.

    Parameters whose ``requires_grad`` is False at step time are skipped, so a
    frozen block is left bit-identical. ``ascent`` marks parameters that maximize
    the objective (adversarial estimators).
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, ascent=()):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.sign = [(-1.0 if any(p is a for a in ascent) else 1.0) for p in self.params]

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if not p.requires_grad:
                continue
            g = self.sign[i] * g
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.value -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
