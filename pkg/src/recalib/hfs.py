"""Hierarchical feature separation.

Three encoder streams map raw frames to depression (``F_d``), noise (``F_n``)
and emotion (``F_e``) features; a linear split head divides ``F_e`` into a
depression-related part and the rest. The separation losses push the streams
apart:

* ``orth_loss``: squared block inner product of ``F_d`` and ``F_n``.
* ``loss_mi1``: cross-stream mutual information minus an entropy bonus on ``F_e``.
* ``loss_mi2``: MI between the two emotion halves minus MI between the
  depression-related half and ``F_d``.

The encoder is a per-frame two-layer MLP followed by one temporal
convolution (kernel 3, zero padded). It is deliberately small so every path
can be gradient-checked.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import ParameterError, ShapeError, TrainingError
from .numkit import MLP, Adam, Linear, Module, Tensor, as_tensor, make_rng

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class StreamFeatures:
    F_d: object
    F_n: object
    F_e: object
    F_eDep: object
    F_eNonDep: object

    def numpy(self):
        conv = lambda v: None if v is None else np.asarray(as_tensor(v).value)
        return StreamFeatures(*(conv(getattr(self, k)) for k in ("F_d", "F_n", "F_e", "F_eDep", "F_eNonDep")))


class StreamEncoder(Module):
    def __init__(self, rng, n_in, n_hidden, n_out, zero=False):
        self.mlp = MLP(rng, n_in, n_hidden, n_out, zero=zero)
        # taps for t-1, t, t+1 stacked along the input axis
        self.conv = Linear(rng, 3 * n_out, n_out, zero=zero)
        self.n_in = n_in

    def __call__(self, x):
        x = as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"encoder expects input width {self.n_in}, got shape {x.shape}")
        h = self.mlp(x)
        T = h.shape[-2]
        p = nk.pad_time(h, 1, 1)
        stacked = nk.concat([p[..., 0:T, :], p[..., 1:T + 1, :], p[..., 2:T + 2, :]], axis=-1)
        return self.conv(stacked)


class StreamEncoders(Module):
    """Depression, noise and emotion streams plus the emotion split head."""

    def __init__(self, rng, n_in, n_hidden=32, d_stream=16, d_split=8, zero=False):
        self.depression = StreamEncoder(rng, n_in, n_hidden, d_stream, zero=zero)
        self.noise = StreamEncoder(rng, n_in, n_hidden, d_stream, zero=zero)
        self.emotion = StreamEncoder(rng, n_in, n_hidden, d_stream, zero=zero)
        self.split_dep = Linear(rng, d_stream, d_split, zero=zero)
        self.split_nondep = Linear(rng, d_stream, d_split, zero=zero)


def encode_streams(frames, enc, noise=True):
    """Run the three streams on ``frames`` (T x D or B x T x D)."""
    x = getattr(frames, "frames", frames)
    F_d = enc.depression(x)
    F_n = enc.noise(x) if noise else None
    F_e = enc.emotion(x)
    return StreamFeatures(F_d, F_n, F_e, enc.split_dep(F_e), enc.split_nondep(F_e))


def _samples(x):
    """Flatten leading axes so rows are samples."""
    x = as_tensor(x)
    if x.ndim == 1:
        return nk.reshape(x, (-1, 1))
    if x.ndim > 2:
        return nk.reshape(x, (-1, x.shape[-1]))
    return x


def orth_loss(F_d, F_n):
    """``<F_d, F_n>^2`` with the inner product over the whole T x D block.

    A leading batch axis (3-D input) gives one block per sequence; the result
    is their mean.
    """
    F_d, F_n = as_tensor(F_d), as_tensor(F_n)
    if F_d.shape != F_n.shape:
        raise ShapeError(f"orth_loss shapes differ: {F_d.shape} vs {F_n.shape}")
    prod = nk.mul(F_d, F_n)
    if prod.ndim == 3:
        inner = nk.reduce_sum(nk.reduce_sum(prod, axis=2), axis=1)
        return nk.mean(nk.square(inner))
    return nk.square(nk.reduce_sum(prod))


def orth_loss_cosine(F_d, F_n, eps=nk.EPS):
    """Squared cosine between the two blocks: same zero set as :func:`orth_loss`, bounded by 1."""
    F_d, F_n = as_tensor(F_d), as_tensor(F_n)
    if F_d.shape != F_n.shape:
        raise ShapeError(f"orth_loss shapes differ: {F_d.shape} vs {F_n.shape}")
    n_axes = 2 if F_d.ndim >= 2 else 1

    def block(x):
        for _ in range(n_axes):
            x = nk.reduce_sum(x, axis=-1)
        return x

    inner = block(nk.mul(F_d, F_n))
    norms = nk.mul(block(nk.square(F_d)), block(nk.square(F_n)))
    return nk.mean(nk.div(nk.square(inner), nk.add(norms, eps)))


def pearson_columns(x, y):
    """Per-column Pearson correlation of two sample matrices of equal width."""
    xc = nk.sub(x, nk.mean(x, axis=0, keepdims=True))
    yc = nk.sub(y, nk.mean(y, axis=0, keepdims=True))
    cov = nk.mean(nk.mul(xc, yc), axis=0)
    vx = nk.mean(nk.square(xc), axis=0)
    vy = nk.mean(nk.square(yc), axis=0)
    # floor keeps zero-variance columns at rho = 0 and is scale-free elsewhere
    denom = nk.sqrt(nk.maximum(nk.mul(vx, vy), nk.EPS ** 2), eps=0.0)
    return nk.div(cov, denom)


def mi_gaussian(x, y, eps=nk.EPS):
    """Closed-form Gaussian MI summed over paired columns.

    ``sum_i -0.5 * ln(1 - rho_i^2 + eps)``. If widths differ only the first
    ``min(dx, dy)`` columns are paired.
    """
    x, y = _samples(x), _samples(y)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"sample counts differ: {x.shape} vs {y.shape}")
    if x.shape[0] < 8:
        raise ParameterError(f"mi_gaussian needs at least 8 samples, got {x.shape[0]}")
    d = min(x.shape[1], y.shape[1])
    if x.shape[1] != d:
        x = x[:, :d]
    if y.shape[1] != d:
        y = y[:, :d]
    rho = pearson_columns(x, y)
    terms = nk.log(nk.sub(1.0 + eps, nk.square(rho)))
    return nk.scale(nk.reduce_sum(terms), -0.5)


def entropy_gaussian(x, eps=nk.EPS):
    """Differential entropy of a Gaussian fitted to the samples in ``x``."""
    x = _samples(x)
    n, d = x.shape
    if n < d + 2:
        raise ParameterError(f"entropy_gaussian needs at least d+2={d + 2} samples, got {n}")
    xc = nk.sub(x, nk.mean(x, axis=0, keepdims=True))
    cov = nk.scale(nk.matmul(nk.transpose(xc), xc), 1.0 / (n - 1))
    ld = nk.logdet(nk.add(cov, eps * np.eye(d)))
    return nk.add(nk.scale(ld, 0.5), 0.5 * d * (1.0 + LOG_2PI))


class GaussianMI:
    """Deterministic closed-form backend."""

    backend = "gaussian_closed_form"

    def mi(self, x, y):
        return mi_gaussian(x, y)

    def entropy(self, x):
        return entropy_gaussian(x)

    def parameters(self):
        return []


class NeuralDV(Module):
    """Donsker-Varadhan lower bound with a learned statistics network.

    ``T(x, y)`` is an MLP on the concatenated pair. The bound is
    ``mean T(x_i, y_i) - log mean exp T(x_i, y_pi(i))`` with ``pi`` a random
    permutation drawn from this estimator's own stream.
    """

    backend = "neural_dv"

    def __init__(self, dx, dy, hidden=32, seed=0, zero=False):
        rng = make_rng(seed, "neural_dv")
        self.net = MLP(rng, dx + dy, hidden, 1, zero=zero)
        self._rng = make_rng(seed, "neural_dv", "shuffle")
        self.dx, self.dy = dx, dy

    def statistic(self, x, y):
        return self.net(nk.concat([x, y], axis=-1))

    def bound(self, x, y, perm=None):
        x, y = _samples(x), _samples(y)
        n = x.shape[0]
        if perm is None:
            perm = self._rng.permutation(n)
        joint = nk.mean(self.statistic(x, y))
        marg = self.statistic(x, y[perm])
        log_mean_exp = nk.sub(nk.logsumexp(nk.reshape(marg, (-1,)), axis=0), float(np.log(n)))
        out = nk.sub(joint, log_mean_exp)
        if not np.isfinite(out.value):
            raise TrainingError("neural DV bound diverged",
                                {"joint": float(joint.value), "log_mean_exp": float(log_mean_exp.value)})
        return out

    def mi(self, x, y):
        x, y = _samples(x), _samples(y)
        return self.bound(x[:, : self.dx], y[:, : self.dy])

    def entropy(self, x):
        return entropy_gaussian(x)

    def fit(self, x, y, steps=2000, batch=512, lr=2e-3, seed=0, tol=0.5):
        """Maximize the bound on minibatches; returns the history of batch bounds.

        Raises TrainingError if the smoothed bound drops more than ``tol`` nats
        below its running best after warm-up, or goes non-finite.
        """
        x, y = np.asarray(x, float), np.asarray(y, float)
        rng = make_rng(seed, "neural_dv_fit")
        opt = Adam(self.parameters(), lr=lr)
        history, best, smooth = [], -np.inf, None
        n = x.shape[0]
        for step in range(steps):
            idx = rng.choice(n, size=min(batch, n), replace=False)
            xb, yb = Tensor(x[idx]), Tensor(y[idx])
            with nk.Tape() as tape:
                val = self.bound(xb, yb, perm=rng.permutation(len(idx)))
                loss = nk.neg(val)
            opt.step(tape.gradient(loss, self.parameters()))
            v = float(val.value)
            history.append(v)
            smooth = v if smooth is None else 0.95 * smooth + 0.05 * v
            if step > steps // 4 and smooth < best - tol:
                raise TrainingError("neural DV estimate collapsed", {"step": step, "bound": smooth, "best": best})
            if step > 20:
                best = max(best, smooth)
        return history

    def estimate(self, x, y, n_perm=8, seed=0):
        """Bound on full data averaged over several marginal shuffles."""
        rng = make_rng(seed, "neural_dv_eval")
        x, y = Tensor(np.asarray(x, float)), Tensor(np.asarray(y, float))
        vals = [float(self.bound(x, y, perm=rng.permutation(x.shape[0])).value) for _ in range(n_perm)]
        return float(np.mean(vals))


def mi_neural_dv(x, y, stats_net, steps=0, **fit_kwargs):
    """DV estimate of I(x; y); trains ``stats_net`` for ``steps`` first if asked."""
    if steps:
        stats_net.fit(np.asarray(as_tensor(x).value), np.asarray(as_tensor(y).value), steps=steps, **fit_kwargs)
    return stats_net.bound(as_tensor(x), as_tensor(y))


def make_estimator(backend, dx=16, dy=16, seed=0):
    if backend == "gaussian_closed_form":
        return GaussianMI()
    if backend == "neural_dv":
        return NeuralDV(dx, dy, seed=seed)
    raise ParameterError(f"unknown MI backend {backend!r}")


def loss_mi1(F_d, F_n, F_e, weights=(1.0, 1.0, 1.0, 0.1), estimator=None):
    """``l0 I(F_d;F_n) + l1 I(F_e;F_d) + l2 I(F_e;F_n) - l3 H(F_e)``.

    ``F_n=None`` (noise stream ablated) drops the two terms that need it.
    """
    est = estimator or GaussianMI()
    l0, l1, l2, l3 = weights
    F_d, F_e = _samples(F_d), _samples(F_e)
    total = nk.scale(est.mi(F_e, F_d), l1)
    if F_n is not None:
        F_n = _samples(F_n)
        total = nk.add(total, nk.add(nk.scale(est.mi(F_d, F_n), l0), nk.scale(est.mi(F_e, F_n), l2)))
    if l3:
        total = nk.sub(total, nk.scale(est.entropy(F_e), l3))
    return total


def loss_mi2(F_eDep, F_eNonDep, F_d, estimator=None):
    """``I(F_eDep; F_eNonDep) - I(F_eDep; F_d)``."""
    est = estimator or GaussianMI()
    a, b, d = _samples(F_eDep), _samples(F_eNonDep), _samples(F_d)
    return nk.sub(est.mi(a, b), est.mi(a, d))
