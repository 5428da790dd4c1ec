"""The full recalibration pipeline and the naive-fusion baseline.

:class:`RecalibNet` wires the stages in order:

1. three encoder streams and the emotion split,
2. one segment graph per stream type with a GCN update and residual mix,
3. a cross graph between the emotion halves, again with a residual mix,
4. attention refinement, teacher/student distillation and fusion,
5. mean-pool classifier.

``forward`` returns every intermediate so the trainer can assemble losses
and the harness can trace attention weights. Stage toggles live in
:class:`Stages`; turning one off skips exactly that computation.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import ad, dcr, hfs
from . import numkit as nk
from .numkit import Linear, Module, as_tensor

STAGE_NAMES = (
    "noise_stream", "emotion_stream", "first_level", "second_level",
    "graph_update_1", "graph_update_2", "graph_reg_1", "graph_reg_2", "distill", "fuse",
)


@dataclass(frozen=True)
class Stages:
    noise_stream: bool = True
    emotion_stream: bool = True
    first_level: bool = True
    second_level: bool = True
    graph_update_1: bool = True
    graph_update_2: bool = True
    graph_reg_1: bool = True
    graph_reg_2: bool = True
    distill: bool = True
    fuse: bool = True

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class Widths:
    d_in: int = 32
    hidden: int = 32
    stream: int = 16
    split: int = 8
    sim: int = 8
    child_enc: int = 4
    attn_common: int = 8
    attn_hidden1: int = 16
    attn_hidden2: int = 16
    teacher_hidden: int = 32
    teacher_layers: int = 3
    teacher_out: int = 16
    student_hidden: int = 8


class RecalibNet(Module):
    def __init__(self, rng, widths=Widths()):
        w = widths
        self.widths = w
        self.encoders = hfs.StreamEncoders(rng, w.d_in, w.hidden, w.stream, w.split)
        self.emotion_head = Linear(rng, w.stream, 6)
        self.posterior_head = Linear(rng, w.stream, 1)
        self.noise_adversary = Linear(rng, w.stream, 1)
        self.graphs = dcr.DcrBlock(rng, w.stream, w.sim, w.split, w.child_enc)
        self.attention = ad.AfrAttention(rng, w.split, w.stream, w.attn_common, w.attn_hidden1, w.attn_hidden2)
        self.gru = ad.GruStack(rng, w.split, w.teacher_hidden, w.teacher_layers, w.teacher_out, w.student_hidden)
        dist_width = w.student_hidden
        self.fusion = ad.FusionHead(rng, dist_width, w.stream)

    def emotion_parameters(self):
        """Parameters fixed by emotion pretraining."""
        return self.encoders.emotion.parameters() + self.emotion_head.parameters()

    def frozen_parameters(self):
        return self.emotion_parameters() + self.posterior_head.parameters() + self.gru.teacher_parameters()

    def trainable_parameters(self, stages=Stages()):
        """Parameters the main loop updates, minus those of disabled stages."""
        skip = {id(p) for p in self.frozen_parameters()}
        drop = []
        if not stages.noise_stream:
            drop += self.encoders.noise.parameters() + self.noise_adversary.parameters()
        g = self.graphs
        if not stages.emotion_stream:
            drop += (self.encoders.split_dep.parameters() + self.encoders.split_nondep.parameters()
                     + g.child_mlp.parameters() + [g.W_e] + g.proj2.parameters()
                     + self.attention.parameters() + self.gru.parameters() + self.fusion.align.parameters())
        if not stages.second_level:
            drop += self.encoders.split_nondep.parameters() + g.child_mlp.parameters() + [g.W_e] + g.proj2.parameters()
        if not stages.graph_update_1:
            drop += g.sim_mlp.parameters() + g.gcn_d.parameters() + g.gcn_n.parameters() + g.gcn_e.parameters() + g.proj1.parameters()
        if not stages.graph_update_2:
            drop += [g.W_e] + g.proj2.parameters()
            if not stages.graph_reg_2:
                drop += g.child_mlp.parameters()
        if not stages.distill:
            drop += self.gru.parameters()
        if not stages.fuse:
            drop += self.attention.parameters() + self.gru.parameters() + self.fusion.align.parameters()
        skip |= {id(p) for p in drop}
        return [p for p in self.parameters() if id(p) not in skip]


def _frames(batch):
    if isinstance(batch, (list, tuple)):
        return np.stack([getattr(s, "frames", s) for s in batch])
    return getattr(batch, "frames", batch)


def forward(model, batch, stages=Stages(), dcr_cfg=dcr.DcrConfig(), beta=0.5, tau=2.0):
    """Run every enabled stage on a batch (B x T x D or a list of sequences).

    Returns a dict of intermediates; keys for skipped stages map to None.
    """
    x = as_tensor(_frames(batch))
    enc = model.encoders
    out = {"x": x}
    F_d = enc.depression(x)
    F_n = enc.noise(x) if stages.noise_stream else None
    F_e = enc.emotion(x) if stages.emotion_stream else None
    F_eDep = F_eNonDep = None
    if F_e is not None:
        F_eDep = enc.split_dep(F_e)
        if stages.second_level:
            F_eNonDep = enc.split_nondep(F_e)
    out.update(F_d=F_d, F_n=F_n, F_e=F_e, F_eDep=F_eDep, F_eNonDep=F_eNonDep)

    # first-stage graphs, one per stream type
    g = model.graphs
    K = dcr_cfg.K
    present = [("d", F_d, g.gcn_d), ("n", F_n, g.gcn_n), ("e", F_e, g.gcn_e)]
    present = [(k, f, gcn) for k, f, gcn in present if f is not None]
    nodes, updated, adj = {}, {}, {}
    for key, feat, gcn in present:
        nodes[key] = dcr.segment(feat, K)
        if stages.graph_update_1:
            A = dcr.similarity_matrix(nodes[key], g.sim_mlp, dcr_cfg.gamma)
            A_hat = dcr.normalize_adjacency(A)
            adj[key] = (A, A_hat)
            updated[key] = gcn(A_hat, nodes[key])
    out["graph_nodes"] = nodes
    out["graph_adjacency"] = adj
    out["graph_updated"] = updated
    F_d_prime = F_d
    if stages.graph_update_1:
        F_d_prime = dcr.residual_integrate(F_d, updated["d"], g.proj1, dcr_cfg.alpha)
    out["F_d_prime"] = F_d_prime

    # second-stage cross graph between the emotion halves
    F_dep_final, F_non_final = F_eDep, F_eNonDep
    out["A_cross"] = None
    if F_eNonDep is not None:
        dep_seg = dcr.segment(F_eDep, K)
        non_seg = dcr.segment(F_eNonDep, K)
        if stages.graph_update_2:
            A_cross, upd_dep, upd_non = dcr.child_graph(dep_seg, non_seg, g.child_mlp, g.W_e, update=True)
            out["A_cross"] = A_cross
            F_dep_final = dcr.residual_integrate(F_eDep, upd_dep, g.proj2, dcr_cfg.alpha)
            F_non_final = dcr.residual_integrate(F_eNonDep, upd_non, g.proj2, dcr_cfg.alpha)
    out["F_eDep_prime"] = F_dep_final
    out["F_eNonDep_prime"] = F_non_final

    # attention refinement, distillation, fusion
    out.update(afr_weights=None, F_ref=None, teacher=None, student=None, F_dist=None)
    F_fuse = F_d_prime
    if F_dep_final is not None and stages.fuse:
        w = ad.afr_weights(F_dep_final, F_d_prime, model.attention)
        F_ref = ad.refine(F_dep_final, w)
        out.update(afr_weights=w, F_ref=F_ref)
        if stages.distill:
            teacher = model.gru.teach(F_ref)
            student = model.gru.learn(F_ref)
            out.update(teacher=teacher, student=student)
            F_dist = student
        else:
            F_dist = F_ref
        out["F_dist"] = F_dist
        F_fuse = ad.fuse(F_d_prime, F_dist, model.fusion.align, beta)
    out["F_fuse"] = F_fuse
    out["logit"] = ad.classify_logit(F_fuse, model.fusion.classifier)
    return out


def predict_proba(model, batch, stages=Stages(), dcr_cfg=dcr.DcrConfig(), beta=0.5, chunk=64):
    """p(Y=1) per sequence, computed off-tape in chunks."""
    x = _frames(batch)
    probs = []
    for i in range(0, x.shape[0], chunk):
        out = forward(model, x[i:i + chunk], stages, dcr_cfg, beta)
        probs.append(nk.sigmoid(out["logit"]).value)
    return np.concatenate(probs) if probs else np.zeros(0)


def emotion_posteriors(model, batch):
    """Per-frame p(Y=1 | emotion features) from the frozen emotion-only head."""
    x = as_tensor(_frames(batch))
    F_e = model.encoders.emotion(x)
    logit = model.posterior_head(F_e)
    return nk.sigmoid(nk.reshape(logit, logit.shape[:-1])).value


def stream_features(model, batch, stages=Stages()):
    """Stream features as numpy arrays (no tape)."""
    x = as_tensor(_frames(batch))
    return hfs.encode_streams(x, model.encoders, noise=stages.noise_stream).numpy()


def classify_streams(model, feats, stages=Stages(), dcr_cfg=dcr.DcrConfig(), beta=0.5):
    """Run stages 2 onward from precomputed (possibly recombined) stream features.

    Used by the counterfactual protocol, where ``F_d`` and ``F_e`` come from
    different subjects.
    """
    sub = _Substituted(model, feats)
    return forward(sub, np.zeros(np.shape(feats.F_d)[:-1] + (model.widths.d_in,)), stages, dcr_cfg, beta)


class _Substituted:
    """Model view whose encoders return fixed features."""

    def __init__(self, model, feats):
        self.__dict__.update(model.__dict__)
        self.encoders = _FixedEncoders(model.encoders, feats)


class _FixedEncoders:
    def __init__(self, enc, feats):
        self.depression = lambda x: as_tensor(feats.F_d)
        self.noise = lambda x: as_tensor(feats.F_n)
        self.emotion = lambda x: as_tensor(feats.F_e)
        self.split_dep = lambda F_e: as_tensor(feats.F_eDep)
        self.split_nondep = lambda F_e: as_tensor(feats.F_eNonDep)


class NaiveFusion(Module):
    """Depression encoder plus the frozen emotion encoder, pooled and concatenated."""

    def __init__(self, rng, emotion_encoder, widths=Widths()):
        w = widths
        self.depression = hfs.StreamEncoder(rng, w.d_in, w.hidden, w.stream)
        self.classifier = Linear(rng, 2 * w.stream, 1)
        self._emotion = emotion_encoder  # shared, frozen; not a parameter of this model

    def trainable_parameters(self):
        return self.depression.parameters() + self.classifier.parameters()

    def named_parameters(self, prefix=""):
        return [(n, p) for n, p in super().named_parameters(prefix) if not n.startswith(prefix + "_emotion")]

    def logit(self, batch):
        x = as_tensor(_frames(batch))
        F_d = nk.mean(self.depression(x), axis=-2)
        F_e = nk.mean(nk.stop_gradient(self._emotion(x)), axis=-2)
        z = self.classifier(nk.concat([F_d, F_e], axis=-1))
        return nk.reshape(z, z.shape[:-1])


def naive_predict_proba(model, batch, chunk=64):
    x = _frames(batch)
    return np.concatenate([nk.sigmoid(model.logit(x[i:i + chunk])).value for i in range(0, x.shape[0], chunk)])
