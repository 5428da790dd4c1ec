"""Dual consistency regularization over temporal segment graphs.

A sequence is cut into ``K`` contiguous segments; each segment's mean is a
graph node. The first stage builds one graph per feature type from a
decay-weighted similarity, runs a GCN layer and scores the result with
``loss_graph``. The second stage builds a cross graph between the two emotion
halves, updates both with one shared GCN weight and scores them with
``loss_flow``. Updated node values are broadcast back to their frames and
mixed into the originals with weight ``alpha``.

Everything accepts an optional leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .errors import ParameterError, ShapeError, ValidationError
from .numkit import MLP, Linear, Module, Tensor, as_tensor, xavier_uniform


def segment_bounds(T, K):
    """Start/stop pairs of K near-equal segments; leading segments take the remainder."""
    if K < 1 or T < K:
        raise ParameterError(f"cannot split T={T} frames into K={K} segments")
    base, extra = divmod(T, K)
    lengths = [base + (1 if k < extra else 0) for k in range(K)]
    stops = np.cumsum(lengths)
    return [(int(s - n), int(s)) for s, n in zip(stops, lengths)]


def segment_matrix(T, K):
    """K x T averaging matrix; ``P @ F`` mean-pools each segment."""
    P = np.zeros((K, T))
    for k, (a, b) in enumerate(segment_bounds(T, K)):
        P[k, a:b] = 1.0 / (b - a)
    return P


def broadcast_matrix(T, K):
    """T x K indicator; ``B @ nodes`` gives each frame its segment's node value."""
    B = np.zeros((T, K))
    for k, (a, b) in enumerate(segment_bounds(T, K)):
        B[a:b, k] = 1.0
    return B


def segment(features, K):
    features = as_tensor(features)
    T = features.shape[-2]
    return nk.matmul(segment_matrix(T, K), features)


def decay_matrix(K, gamma):
    idx = np.arange(K)
    return np.exp(-gamma * np.abs(idx[:, None] - idx[None, :]))


def similarity_matrix(nodes, mlp, gamma=1.0):
    """Row softmax of ``(z_i . z_j / sqrt(d)) * exp(-gamma |i - j|)``, z = mlp(node).

    The decay multiplies the score before the softmax, as the composed
    expression reads; ``softmax(score) * decay`` would be a different graph.
    """
    if gamma < 0:
        raise ParameterError(f"gamma must be >= 0, got {gamma}")
    z = mlp(nodes) if mlp is not None else as_tensor(nodes)
    K, d = z.shape[-2], z.shape[-1]
    scores = nk.scale(nk.matmul(z, nk.transpose(z)), 1.0 / np.sqrt(d))
    return nk.softmax(nk.mul(scores, decay_matrix(K, gamma)), axis=-1)


def normalize_adjacency(A):
    """``D^-1/2 (A + I) D^-1/2`` with D the row sums of ``A + I``."""
    A = as_tensor(A)
    if np.any(A.value < 0):
        raise ParameterError("adjacency must be nonnegative")
    K = A.shape[-1]
    A1 = nk.add(A, np.eye(K))
    inv_sqrt = nk.div(1.0, nk.sqrt(nk.reduce_sum(A1, axis=-1, keepdims=True), eps=0.0))
    return nk.mul(nk.mul(inv_sqrt, A1), nk.transpose(inv_sqrt))


def gcn_update(A_hat, H, W):
    """``ReLU(A_hat @ H @ W)``."""
    A_hat, H, W = as_tensor(A_hat), as_tensor(H), as_tensor(W)
    if A_hat.shape[-1] != H.shape[-2]:
        raise ShapeError(f"adjacency {A_hat.shape} does not match node features {H.shape}")
    return nk.relu(nk.matmul(A_hat, nk.matmul(H, W)))


def _block_sum(x):
    """Sum over the last two axes, keeping any batch axis."""
    return nk.reduce_sum(nk.reduce_sum(x, axis=-1), axis=-1)


def loss_graph(types, lam=1.0, sign=-1.0, projections=None):
    """``mean_b (S_b + sign * lam * C_b)`` over a list of K x D node blocks.

    ``S_b`` sums each type's self inner products ``diag(F_i F_i^T)``;
    ``C_b`` sums ``diag(F_i F_j^T)`` over ordered pairs ``i != j``.
    ``sign=-1`` is the form ``S - lam * C``; ``sign=+1`` flips the cross term.
    Blocks of different width need ``projections`` (one matrix or None per
    type) mapping them to a common width.
    """
    types = [as_tensor(t) for t in types]
    if projections is not None:
        types = [t if p is None else nk.matmul(t, p) for t, p in zip(types, projections)]
    widths = {t.shape[-1] for t in types}
    if len(widths) > 1:
        raise ShapeError(f"loss_graph needs a common width, got {sorted(widths)}")
    S = None
    for t in types:
        s = _block_sum(nk.square(t))
        S = s if S is None else nk.add(S, s)
    C = None
    for i, a in enumerate(types):
        for j, b in enumerate(types):
            if i == j:
                continue
            c = _block_sum(nk.mul(a, b))
            C = c if C is None else nk.add(C, c)
    total = S if C is None else nk.add(S, nk.scale(C, sign * lam))
    return nk.mean(total)


def child_graph(dep_seg, nondep_seg, mlp, W_e, update=True):
    """Cross graph between the two emotion halves and the shared-weight update.

    Returns ``(A_cross, dep_upd, nondep_upd)``; with ``update=False`` the
    encoded nodes are returned unchanged.
    """
    dep_seg, nondep_seg = as_tensor(dep_seg), as_tensor(nondep_seg)
    if dep_seg.shape != nondep_seg.shape:
        raise ShapeError(f"child graph inputs differ: {dep_seg.shape} vs {nondep_seg.shape}")
    enc_d = mlp(dep_seg)
    enc_n = mlp(nondep_seg)
    d = enc_d.shape[-1]
    A_cross = nk.softmax(nk.scale(nk.matmul(enc_d, nk.transpose(enc_n)), 1.0 / np.sqrt(d)), axis=-1)
    if not update:
        return A_cross, enc_d, enc_n
    A_hat = normalize_adjacency(A_cross)
    return A_cross, gcn_update(A_hat, enc_d, W_e), gcn_update(A_hat, enc_n, W_e)


def variance_all(x):
    x = as_tensor(x)
    return nk.mean(nk.square(nk.sub(x, nk.mean(x))))


def pearson_flat(a, b):
    """Pearson correlation of two flattened tensors, truncated to equal length."""
    a = nk.reshape(as_tensor(a), (-1,))
    b = nk.reshape(as_tensor(b), (-1,))
    n = min(a.shape[0], b.shape[0])
    if a.shape[0] != n:
        a = a[:n]
    if b.shape[0] != n:
        b = b[:n]
    ac = nk.sub(a, nk.mean(a))
    bc = nk.sub(b, nk.mean(b))
    cov = nk.mean(nk.mul(ac, bc))
    denom = nk.mul(nk.sqrt(nk.mean(nk.square(ac))), nk.sqrt(nk.mean(nk.square(bc))))
    return nk.safe_div(cov, denom)


def loss_flow(F_dep, F_nondep, mu=0.1):
    """``-sqrt(Var F_dep) - sqrt(Var F_nondep) + mu * R_dn``."""
    spread = nk.add(nk.sqrt(variance_all(F_dep)), nk.sqrt(variance_all(F_nondep)))
    out = nk.neg(spread)
    if mu:
        out = nk.add(out, nk.scale(pearson_flat(F_dep, F_nondep), mu))
    return out


def residual_integrate(F_orig, F_upd, proj, alpha=0.7):
    """``alpha * F + (1 - alpha) * proj(F_upd)`` with node values broadcast to frames.

    ``proj`` is a callable (e.g. a Linear) or None for identity.
    """
    F_orig, F_upd = as_tensor(F_orig), as_tensor(F_upd)
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    T, K = F_orig.shape[-2], F_upd.shape[-2]
    P = proj(F_upd) if proj is not None else F_upd
    if P.shape[-1] != F_orig.shape[-1]:
        raise ShapeError(f"projected update width {P.shape[-1]} != feature width {F_orig.shape[-1]}")
    framed = nk.matmul(broadcast_matrix(T, K), P)
    return nk.add(nk.scale(F_orig, alpha), nk.scale(framed, 1.0 - alpha))


@dataclass
class DcrConfig:
    K: int = 5
    gamma: float = 1.0
    lam: float = 1.0
    mu: float = 0.1
    alpha: float = 0.7
    # verbatim S - lam*C is unbounded below on ReLU outputs and diverges in training
    graph_loss_sign: str = "flipped"

    def validate(self):
        if self.K < 1:
            raise ValidationError("K", f"must be >= 1, got {self.K}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha", f"must lie in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValidationError("gamma", f"must be >= 0, got {self.gamma}")
        if self.graph_loss_sign not in ("verbatim", "flipped"):
            raise ValidationError("graph_loss_sign", f"must be 'verbatim' or 'flipped', got {self.graph_loss_sign!r}")
        return self

    @property
    def cross_sign(self):
        return -1.0 if self.graph_loss_sign == "verbatim" else 1.0


class GcnLayer(Module):
    def __init__(self, rng, n_in, n_out):
        self.weight = Tensor(xavier_uniform(rng, n_in, n_out), requires_grad=True)

    def __call__(self, A_hat, H):
        return gcn_update(A_hat, H, self.weight)


class DcrBlock(Module):
    """Parameters of both stages.

    First stage: a similarity MLP shared by the three types, one GCN layer per
    type, and one projection back to stream width shared by the types.
    Second stage: a shared two-layer encoder MLP, the shared GCN weight
    ``W_e`` and a projection back to split width.
    """

    def __init__(self, rng, d_stream=16, d_sim=8, d_split=8, d_enc=4):
        self.sim_mlp = MLP(rng, d_stream, d_stream, d_sim)
        self.gcn_d = GcnLayer(rng, d_stream, d_sim)
        self.gcn_n = GcnLayer(rng, d_stream, d_sim)
        self.gcn_e = GcnLayer(rng, d_stream, d_sim)
        self.proj1 = Linear(rng, d_sim, d_stream)
        self.child_mlp = MLP(rng, d_split, d_split, d_enc)
        self.W_e = Tensor(xavier_uniform(rng, d_enc, d_enc), requires_grad=True)
        self.proj2 = Linear(rng, d_enc, d_split)
