"""Experiment protocols: ablation grid, ambiguity stress test, counterfactual
recombination, identity probe on the noise stream, attention tracing.

Each protocol returns plain row dicts; :mod:`recalib.cli` writes them as CSV.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ambiguity, train
from .ambiguity import EmotionPosteriorTrack, inject_bursts
from .errors import ParameterError
from .model import STAGE_NAMES, classify_streams, emotion_posteriors, forward, predict_proba, stream_features
from .numkit import make_rng, sigmoid
from .synthgen import HAPPINESS, Generator, recombine_chimera

ABLATION_LABELS = {
    "noise_stream": "Noise", "emotion_stream": "Emo.", "first_level": "1st", "second_level": "2sec",
    "graph_update_1": "up3", "graph_update_2": "up2", "graph_reg_1": "reg3", "graph_reg_2": "reg2",
    "distill": "Distill", "fuse": "Fuse",
}
GRIDS = {
    ("dcr", "lam"): (0.5, 1.0, 2.0),
    ("dcr", "mu"): (0.05, 0.1, 0.2),
    ("ad", "beta"): (0.25, 0.5, 0.75),
}
METRIC_COLUMNS = ("accuracy", "precision", "recall", "f1")
EXTRA_OFFSET = 2_000_000


@dataclass
class Trained:
    """A fitted pipeline with the data it was fitted on."""

    cfg: object
    result: object
    data: tuple

    @property
    def model(self):
        return self.result.model


def train_pipeline(cfg, log=None):
    cfg = cfg.validate()
    data = train.make_data(cfg)
    return Trained(cfg, train.fit(cfg, data, log=log), data)


# --- ablation -------------------------------------------------------------

def ablation_configs(cfg):
    """``[(row_name, config)]``: one per stage toggle, the full model, then the grids."""
    rows = [(ABLATION_LABELS[name], cfg.with_stages(**{name: False})) for name in STAGE_NAMES]
    rows.append(("full", cfg))
    for (section, key), values in GRIDS.items():
        for v in values:
            rows.append((f"{key}={v}", cfg.override(section, **{key: v})))
    return rows


def ablate(cfg, rows=None, log=None):
    """Train every row from scratch and evaluate it on the held-out test split."""
    out = []
    for name, rcfg in rows if rows is not None else ablation_configs(cfg):
        t = train_pipeline(rcfg)
        m = train.evaluate(t.model, t.data[2], rcfg)
        out.append({"row": name, "config_hash": rcfg.hash()[:12], "best_epoch": t.result.best_epoch, **m.as_dict()})
        if log:
            log(f"{name:>10s} f1 {m.f1:.3f}")
    return out


def config_diff(a, b):
    """Dotted keys whose values differ between two configs."""
    from dataclasses import fields

    diff = []
    for sec in fields(a):
        x, y = getattr(a, sec.name), getattr(b, sec.name)
        for f in fields(x):
            if getattr(x, f.name) != getattr(y, f.name):
                diff.append(f"{sec.name}.{f.name}")
    return diff


# --- emotional-ambiguity stress test --------------------------------------

def stress_sets(seqs, seed, count=3, duration=10):
    """Per intensity, a copy of ``seqs`` with sadness bursts injected.

    Windows depend only on the sequence position, so the four sets differ
    only in burst intensity.
    """
    sets = {}
    for level in ambiguity.INTENSITY_LEVELS:
        if level == "none":
            sets[level] = list(seqs)
            continue
        sets[level] = [inject_bursts(s, level, count, duration, make_rng(seed, "ea_windows", i))
                       for i, s in enumerate(seqs)]
    return sets


def mean_ea_err(model, seqs, tau):
    x = np.stack([s.frames for s in seqs])
    post = emotion_posteriors(model, x)
    return float(np.mean([ambiguity.ea_err(EmotionPosteriorTrack(p, s.label), tau) for p, s in zip(post, seqs)]))


def ea_test(trained, naive=None, count=3, duration=10):
    """Accuracy of the full pipeline and the naive baseline per burst intensity."""
    cfg = trained.cfg
    test = trained.data[2]
    if naive is None:
        naive = train.fit_naive(cfg, trained.model.encoders.emotion, trained.data)
    rows = []
    for level, seqs in stress_sets(test, cfg.run.seed, count, duration).items():
        ea = mean_ea_err(trained.model, seqs, cfg.run.ea_tau)
        rows.append({"intensity": level, "model": "full", "accuracy": train.evaluate(trained.model, seqs, cfg).accuracy,
                     "mean_ea_err": ea, "tau": cfg.run.ea_tau})
        rows.append({"intensity": level, "model": "naive_fusion", "accuracy": train.evaluate_naive(naive, seqs).accuracy,
                     "mean_ea_err": ea, "tau": cfg.run.ea_tau})
    return rows


def accuracy_drop(rows, model):
    acc = {r["intensity"]: r["accuracy"] for r in rows if r["model"] == model}
    return acc["none"] - acc["high"]


# --- counterfactual recombination -----------------------------------------

def recombination_pairs(cfg, n_pairs=100):
    """``n_pairs`` (depressed, healthy) sequence pairs drawn outside the training pool."""
    gen = Generator(cfg.generator)
    seqs = gen.generate(4 * n_pairs, offset=EXTRA_OFFSET)
    dep = [s for s in seqs if s.label == 1][:n_pairs]
    hea = [s for s in seqs if s.label == 0][:n_pairs]
    if len(dep) < n_pairs or len(hea) < n_pairs:
        raise ParameterError("not enough sequences of each label for the requested pairs")
    return dep, hea


def recombine(trained, n_pairs=100):
    """Agreement of predictions with the core source for originals and chimeras.

    A is depressed and B healthy in every pair. Chimera A takes A's core and
    B's shell, so agreement means "predicted depressed"; Chimera B is the
    reverse.
    """
    cfg, model = trained.cfg, trained.model
    A, B = recombination_pairs(cfg, n_pairs)
    xa, xb = np.stack([s.frames for s in A]), np.stack([s.frames for s in B])
    fa, fb = stream_features(model, xa, cfg.stages), stream_features(model, xb, cfg.stages)

    def pred(feats):
        out = classify_streams(model, feats, cfg.stages, cfg.dcr, cfg.ad.beta)
        return sigmoid(out["logit"]).value >= 0.5

    pa = predict_proba(model, xa, cfg.stages, cfg.dcr, cfg.ad.beta) >= 0.5
    pb = predict_proba(model, xb, cfg.stages, cfg.dcr, cfg.ad.beta) >= 0.5
    ca = pred(recombine_chimera(fa, fb, "A"))
    cb = pred(recombine_chimera(fa, fb, "B"))
    return [
        {"row": "Original A", "core": "A", "shell": "A", "core_label": 1, "agreement": float(np.mean(pa)), "n": n_pairs},
        {"row": "Original B", "core": "B", "shell": "B", "core_label": 0, "agreement": float(np.mean(~pb)), "n": n_pairs},
        {"row": "Chimera A", "core": "A", "shell": "B", "core_label": 1, "agreement": float(np.mean(ca)), "n": n_pairs},
        {"row": "Chimera B", "core": "B", "shell": "A", "core_label": 0, "agreement": float(np.mean(~cb)), "n": n_pairs},
    ]


# --- noise-channel identity probe ------------------------------------------

def identity_probe(features, identities, seed=0, hidden=32, max_iter=600):
    """Held-out accuracy of a small MLP predicting identity from per-sequence features."""
    import warnings

    from sklearn.exceptions import ConvergenceWarning
    from sklearn.neural_network import MLPClassifier
    from sklearn.preprocessing import StandardScaler

    identities = np.asarray(identities)
    n = len(identities)
    order = make_rng(seed, "probe_split", n).permutation(n)
    cut = int(0.8 * n)
    tr, te = order[:cut], order[cut:]
    scaler = StandardScaler().fit(features[tr])
    clf = MLPClassifier(hidden_layer_sizes=(hidden,), max_iter=max_iter, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(scaler.transform(features[tr]), identities[tr])
    return float(clf.score(scaler.transform(features[te]), identities[te]))


def probe_noise(trained, n=None):
    """Identity-probe accuracy from mean-pooled F_n, F_d and raw frames."""
    cfg, model = trained.cfg, trained.model
    if cfg.generator.n_identities < 2:
        raise ParameterError("identity probe needs at least 2 identities")
    if not cfg.stages.noise_stream:
        raise ParameterError("identity probe needs the noise stream")
    train_seqs, val_seqs, test_seqs = trained.data
    seqs = list(train_seqs) + list(val_seqs) + list(test_seqs) if n is None else \
        Generator(cfg.generator).generate(n, offset=EXTRA_OFFSET)
    x = np.stack([s.frames for s in seqs])
    ids = np.array([s.factors.identity_id for s in seqs])
    feats = stream_features(model, x, cfg.stages)
    rows = []
    for name, block in (("F_n", feats.F_n), ("F_d", feats.F_d), ("raw", x)):
        acc = identity_probe(block.mean(axis=1), ids, seed=cfg.run.seed)
        rows.append({"features": name, "accuracy": acc, "n_identities": int(len(np.unique(ids))), "n": len(seqs)})
    return rows


# --- attention tracing ----------------------------------------------------

def trace_afr(trained, sample_ids, inject=True, count=2, duration=6):
    """Per-frame attention weights for selected test sequences.

    With ``inject`` the sequences first receive high-intensity happiness
    bursts, the positive-emotion probe of the tracing protocol.
    """
    cfg, model = trained.cfg, trained.model
    test = trained.data[2]
    if not cfg.stages.fuse or not cfg.stages.emotion_stream:
        raise ParameterError("attention tracing needs the emotion stream and the fusion stage")
    rows = []
    for sid in sample_ids:
        if not 0 <= sid < len(test):
            raise ParameterError(f"unknown sample id {sid} (test set has {len(test)} sequences)")
        seq = test[sid]
        if inject:
            seq = inject_bursts(seq, "high", count, duration, make_rng(cfg.run.seed, "trace", sid), emotion=HAPPINESS)
        out = forward(model, seq.frames[None], cfg.stages, cfg.dcr, cfg.ad.beta)
        w = out["afr_weights"].value[0]
        f = seq.factors
        for t in range(seq.T):
            rows.append({"sample": sid, "t": t, "w_t": float(w[t]), "emotion_intensity": float(f.emotion_intensity[t]),
                         "burst": int(f.burst_mask[t] or f.injected_mask[t]), "label": seq.label})
    return rows


def window_contrast(rows):
    """Mean weight inside minus outside burst frames, over depressed samples."""
    inside = [r["w_t"] for r in rows if r["label"] == 1 and r["burst"]]
    outside = [r["w_t"] for r in rows if r["label"] == 1 and not r["burst"]]
    if not inside or not outside:
        return float("nan")
    return float(np.mean(inside) - np.mean(outside))
