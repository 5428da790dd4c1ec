"""Asymmetric distillation: attention refinement, teacher/student GRUs, fusion.

GRU convention (fixed so hand oracles are exact)::

    z_t = sigmoid(x W_z + h U_z + b_z)
    r_t = sigmoid(x W_r + h U_r + b_r)
    c_t = tanh(x W_h + (r_t * h) U_h + b_h)
    h_t = (1 - z_t) * h + z_t * c_t,     h_0 = 0

The distillation and refinement paths never see a differentiable ``F_d'``:
attention receives it through ``stop_gradient``, so emotion processing cannot
push gradients into the depression stream.
"""
from __future__ import annotations

import numpy as np

from . import numkit as nk
from .errors import ParameterError, ShapeError
from .numkit import MLP, Linear, Module, Tensor, as_tensor, record, xavier_uniform
from .numkit.ops import _sigmoid

GATES = ("z", "r", "h")


class GruLayer(Module):
    def __init__(self, rng, n_in, n_hidden, zero=False):
        def init(a, b):
            return np.zeros((a, b)) if zero else xavier_uniform(rng, a, b)

        for g in GATES:
            setattr(self, f"W_{g}", Tensor(init(n_in, n_hidden), requires_grad=True))
            setattr(self, f"U_{g}", Tensor(init(n_hidden, n_hidden), requires_grad=True))
            setattr(self, f"b_{g}", Tensor(np.zeros(n_hidden), requires_grad=True))
        self.n_in, self.n_hidden = n_in, n_hidden

    def weights(self):
        return [getattr(self, f"{k}_{g}") for g in GATES for k in ("W", "U", "b")]

    def __call__(self, x):
        return gru_forward(x, self)


def gru_forward(x, layer):
    """Run one GRU layer over ``x`` (T x D_in or B x T x D_in) from a zero state.

    A single tape primitive: the forward loop caches gates and the adjoint is
    back-propagation through time.
    """
    x = as_tensor(x)
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"GRU expects input width {layer.n_in}, got shape {x.shape}")
    squeeze = x.ndim == 2
    xv = x.value[None] if squeeze else x.value
    B, T, _ = xv.shape
    H = layer.n_hidden
    params = layer.weights()
    Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh = (p.value for p in params)

    xz = xv @ Wz + bz
    xr = xv @ Wr + br
    xh = xv @ Wh + bh
    hs = np.zeros((B, T + 1, H))
    zs = np.empty((B, T, H))
    rs = np.empty((B, T, H))
    cs = np.empty((B, T, H))
    h = hs[:, 0]
    for t in range(T):
        z = _sigmoid(xz[:, t] + h @ Uz)
        r = _sigmoid(xr[:, t] + h @ Ur)
        c = np.tanh(xh[:, t] + (r * h) @ Uh)
        h = (1.0 - z) * h + z * c
        zs[:, t], rs[:, t], cs[:, t] = z, r, c
        hs[:, t + 1] = h
    out = hs[:, 1:]

    def vjp(g):
        g = g[None] if squeeze else g
        grads = {k: np.zeros_like(v) for k, v in zip(
            ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh"), (Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh))}
        dx = np.empty_like(xv)
        carry = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = g[:, t] + carry
            hp, z, r, c = hs[:, t], zs[:, t], rs[:, t], cs[:, t]
            dz = dh * (c - hp)
            dc = dh * z
            dhp = dh * (1.0 - z)
            da_h = dc * (1.0 - c * c)
            rh = r * hp
            grads["Uh"] += rh.T @ da_h
            d_rh = da_h @ Uh.T
            dr = d_rh * hp
            dhp += d_rh * r
            da_r = dr * r * (1.0 - r)
            da_z = dz * z * (1.0 - z)
            grads["Ur"] += hp.T @ da_r
            grads["Uz"] += hp.T @ da_z
            dhp += da_r @ Ur.T + da_z @ Uz.T
            xt = xv[:, t]
            grads["Wz"] += xt.T @ da_z
            grads["Wr"] += xt.T @ da_r
            grads["Wh"] += xt.T @ da_h
            grads["bz"] += da_z.sum(0)
            grads["br"] += da_r.sum(0)
            grads["bh"] += da_h.sum(0)
            dx[:, t] = da_z @ Wz.T + da_r @ Wr.T + da_h @ Wh.T
            carry = dhp
        dx_out = dx[0] if squeeze else dx
        return (dx_out,) + tuple(grads[k] for k in ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh"))

    return record(out[0] if squeeze else out, (x, *params), vjp)


def gru_reference(x, layer):
    """The same recurrence composed from tape primitives (slow; used as an oracle)."""
    x = as_tensor(x)
    T = x.shape[-2]
    h = Tensor(np.zeros(x.shape[:-2] + (layer.n_hidden,)))
    outs = []
    for t in range(T):
        xt = x[..., t, :]
        z = nk.sigmoid(nk.add(nk.add(nk.matmul(xt[..., None, :], layer.W_z)[..., 0, :],
                                     nk.matmul(h[..., None, :], layer.U_z)[..., 0, :]), layer.b_z))
        r = nk.sigmoid(nk.add(nk.add(nk.matmul(xt[..., None, :], layer.W_r)[..., 0, :],
                                     nk.matmul(h[..., None, :], layer.U_r)[..., 0, :]), layer.b_r))
        rh = nk.mul(r, h)
        c = nk.tanh(nk.add(nk.add(nk.matmul(xt[..., None, :], layer.W_h)[..., 0, :],
                                  nk.matmul(rh[..., None, :], layer.U_h)[..., 0, :]), layer.b_h))
        h = nk.add(nk.mul(nk.sub(1.0, z), h), nk.mul(z, c))
        outs.append(nk.reshape(h, h.shape[:-1] + (1, h.shape[-1])))
    return nk.concat(outs, axis=-2)


class AfrAttention(Module):
    """Per-step scalar attention score and its softmax over time."""

    def __init__(self, rng, d_dep=8, d_d=16, d_common=8, hidden1=16, hidden2=16):
        self.mlp1 = MLP(rng, d_dep, hidden1, d_common)
        self.mlp2 = MLP(rng, d_d, hidden2, d_common)
        # maps F_d' to the F_eDep' width so the gate can see their difference
        self.d_to_dep = Linear(rng, d_d, d_dep, bias=False)
        self.gate = Linear(rng, d_dep, 1)
        self.d_dep = d_dep

    def scores(self, F_dep, F_d):
        a = self.mlp1(F_dep)
        b = self.mlp2(F_d)
        dot = nk.scale(nk.reduce_sum(nk.mul(a, b), axis=-1), 1.0 / np.sqrt(self.d_dep))
        gate = nk.sigmoid(self.gate(nk.sub(F_dep, self.d_to_dep(F_d))))
        return nk.mul(dot, nk.reshape(gate, gate.shape[:-1]))


def afr_weights(F_dep, F_d, attn):
    """Attention weights over time steps (sum to 1 along the time axis)."""
    F_dep, F_d = as_tensor(F_dep), as_tensor(F_d)
    if F_dep.shape[-2] == 0:
        raise ParameterError("afr_weights needs at least one time step")
    if F_dep.shape[:-1] != F_d.shape[:-1]:
        raise ShapeError(f"time axes differ: {F_dep.shape} vs {F_d.shape}")
    return nk.softmax(attn.scores(F_dep, nk.stop_gradient(F_d)), axis=-1)


def refine(F_dep, w):
    """Scale frame t of ``F_dep`` by ``w_t``."""
    F_dep, w = as_tensor(F_dep), as_tensor(w)
    if w.shape != F_dep.shape[:-1]:
        raise ShapeError(f"weights {w.shape} do not match frames {F_dep.shape[:-1]}")
    return nk.mul(F_dep, nk.reshape(w, w.shape + (1,)))


class GruStack(Module):
    """Teacher (stacked GRUs + projection) and student (one GRU + projection to teacher width)."""

    def __init__(self, rng, d_in=8, teacher_hidden=32, teacher_layers=3, teacher_out=16, student_hidden=8):
        dims = [d_in] + [teacher_hidden] * teacher_layers
        self.teacher = [GruLayer(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        self.teacher_proj = Linear(rng, teacher_hidden, teacher_out)
        self.student = GruLayer(rng, d_in, student_hidden)
        self.student_to_teacher = Linear(rng, student_hidden, teacher_out)

    def teacher_parameters(self):
        params = [p for layer in self.teacher for p in layer.parameters()]
        return params + self.teacher_proj.parameters()

    def teach(self, x):
        """Teacher representation, detached: it is a fixed target for the student."""
        h = nk.stop_gradient(x)
        for layer in self.teacher:
            h = gru_forward(h, layer)
        return nk.stop_gradient(self.teacher_proj(h))

    def learn(self, x):
        return gru_forward(x, self.student)


def distill_losses(teacher_out, student_out, proj=None, tau=2.0):
    """``(L_dist, L_mse, L_total)`` with ``L_total = L_dist + 0.5 * L_mse``.

    The student is projected to teacher width first. ``L_dist`` is the KL of
    the teacher's tempered softmax from the student's, taken over the feature
    axis per step and averaged over steps (and batch). ``L_mse`` is the squared
    L2 norm of the projected residual per sequence, averaged over batch.
    """
    t = as_tensor(teacher_out)
    s = proj(student_out) if proj is not None else as_tensor(student_out)
    if s.shape != t.shape:
        raise ShapeError(f"projected student {s.shape} does not match teacher {t.shape}")
    log_p = nk.log_softmax(nk.scale(t, 1.0 / tau), axis=-1)
    log_q = nk.log_softmax(nk.scale(s, 1.0 / tau), axis=-1)
    kl = nk.reduce_sum(nk.mul(nk.exp(log_p), nk.sub(log_p, log_q)), axis=-1)
    L_dist = nk.mean(kl)
    sq = nk.square(nk.sub(s, t))
    if sq.ndim == 3:
        L_mse = nk.mean(nk.reduce_sum(nk.reduce_sum(sq, axis=-1), axis=-1))
    else:
        L_mse = nk.reduce_sum(sq)
    return L_dist, L_mse, nk.add(L_dist, nk.scale(L_mse, 0.5))


def fuse(F_d, F_dist, align, beta=0.5):
    """``F_d' + beta * align(F_dist)``."""
    F_d = as_tensor(F_d)
    aligned = align(F_dist) if align is not None else as_tensor(F_dist)
    if aligned.shape != F_d.shape:
        raise ShapeError(f"aligned features {aligned.shape} do not match F_d' {F_d.shape}")
    return nk.add(F_d, nk.scale(aligned, beta))


def classify_logit(F_fuse, head):
    """Temporal mean-pool then a linear layer; returns the pre-sigmoid logit."""
    pooled = nk.mean(as_tensor(F_fuse), axis=-2)
    logit = head(pooled)
    return nk.reshape(logit, logit.shape[:-1])


def classify(F_fuse, head):
    return nk.sigmoid(classify_logit(F_fuse, head))


def bce_with_logits(logit, y):
    """Mean binary cross-entropy from logits, computed with log-sigmoid for stability."""
    y = np.asarray(y, dtype=float)
    pos = nk.mul(nk.log_sigmoid(logit), y)
    neg = nk.mul(nk.log_sigmoid(nk.neg(logit)), 1.0 - y)
    return nk.neg(nk.mean(nk.add(pos, neg)))


class FusionHead(Module):
    def __init__(self, rng, d_dist=8, d_d=16):
        self.align = Linear(rng, d_dist, d_d)
        self.classifier = Linear(rng, d_d, 1)
