"""Staged training, evaluation and checkpoints.

Stage 0 trains the emotion stream on frame emotion labels and freezes it,
then fits the emotion-only posterior head used by the ambiguity metrics.
The main loop optimizes the weighted sum of all enabled losses with Adam
and keeps the epoch with the best validation F1.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ad, dcr, hfs
from . import numkit as nk
from .config import ExperimentConfig
from .errors import ParameterError, TrainingError
from .model import NaiveFusion, RecalibNet, forward, naive_predict_proba, predict_proba
from .numkit import Adam, Tensor, make_rng
from .synthgen import N_BASIC, NEUTRAL, Generator

TERMS = ("cls", "orth", "mi1", "mi2", "graph", "flow", "distill", "adv")
TEST_OFFSET = 1_000_000


# --- data -----------------------------------------------------------------

def make_data(cfg):
    """``(train, val, test)`` sequence lists for a config."""
    gen = Generator(cfg.generator)
    pool = gen.generate(cfg.run.n_train)
    test = gen.generate(cfg.run.n_test, offset=TEST_OFFSET)
    train, val = split_train_val(pool, cfg.optim.val_fraction, cfg.run.seed)
    return train, val, test


def split_train_val(seqs, val_fraction=0.2, seed=0):
    order = make_rng(seed, "split", len(seqs)).permutation(len(seqs))
    n_val = max(1, int(round(len(seqs) * val_fraction)))
    val_idx = set(order[:n_val].tolist())
    return ([s for i, s in enumerate(seqs) if i not in val_idx],
            [s for i, s in enumerate(seqs) if i in val_idx])


def stack(seqs):
    return np.stack([s.frames for s in seqs]), np.array([s.label for s in seqs], dtype=float)


# --- metrics --------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def as_dict(self):
        return {"accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1}


def metrics_from_predictions(y_true, y_pred):
    y_true = np.asarray(y_true).astype(int).reshape(-1)
    y_pred = np.asarray(y_pred).astype(int).reshape(-1)
    if y_true.size == 0:
        raise ParameterError("cannot compute metrics on empty data")
    if y_true.shape != y_pred.shape:
        raise ParameterError(f"label/prediction lengths differ: {y_true.shape} vs {y_pred.shape}")
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    acc = float(np.mean(y_pred == y_true))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return MetricsRow(acc, prec, rec, f1)


# --- stage 0 --------------------------------------------------------------

def _cross_entropy(logits, labels):
    logp = nk.log_softmax(logits, axis=-1)
    picked = logp[np.arange(labels.shape[0]), labels]
    return nk.neg(nk.mean(picked))


def emotion_accuracy(model, seqs):
    x, _ = stack(seqs)
    cls = np.stack([s.factors.emotion_class for s in seqs])
    logits = model.emotion_head(model.encoders.emotion(x)).value
    mask = cls != NEUTRAL
    if not mask.any():
        return 1.0
    return float(np.mean(np.argmax(logits, axis=-1)[mask] == cls[mask]))


def pretrain_emotion(model, train, val, cfg):
    """Fit the emotion stream on the six basic emotions, then freeze it.

    Neutral frames carry no emotion signal and are excluded. Raises
    TrainingError if validation accuracy stays below the target.
    """
    o = cfg.optim
    params = model.emotion_parameters()
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr=o.pretrain_lr)
    x, _ = stack(train)
    cls = np.stack([s.factors.emotion_class for s in train])
    rng = make_rng(cfg.run.seed, "pretrain")
    acc = emotion_accuracy(model, val)
    history = [acc]
    for epoch in range(o.pretrain_epochs):
        if acc >= o.pretrain_target and epoch >= 5:
            break
        for idx in _batches(len(train), o.batch_size, rng):
            mask = cls[idx] != NEUTRAL
            if not mask.any():
                continue
            with nk.Tape() as tape:
                feats = model.encoders.emotion(x[idx])
                logits = model.emotion_head(feats)
                flat = nk.reshape(logits, (-1, N_BASIC))
                sel = np.flatnonzero(mask.reshape(-1))
                loss = _cross_entropy(flat[sel], cls[idx].reshape(-1)[sel])
            opt.step(tape.gradient(loss, params))
        acc = emotion_accuracy(model, val)
        history.append(acc)
    for p in params:
        p.requires_grad = False
    if acc < o.pretrain_target:
        raise TrainingError(f"emotion pretraining reached {acc:.3f} < {o.pretrain_target}",
                            {"accuracy": acc, "history": history})
    return history


def fit_posterior_head(model, train, cfg, epochs=30):
    """Per-frame logistic head on the frozen emotion features predicting Y."""
    params = model.posterior_head.parameters()
    for p in params:
        p.requires_grad = True
    x, y = stack(train)
    feats = model.encoders.emotion(x).value
    Y = np.repeat(y[:, None], feats.shape[1], axis=1)
    opt = Adam(params, lr=1e-2)
    f = Tensor(feats.reshape(-1, feats.shape[-1]))
    for _ in range(epochs):
        with nk.Tape() as tape:
            logit = nk.reshape(model.posterior_head(f), (-1,))
            loss = ad.bce_with_logits(logit, Y.reshape(-1))
        opt.step(tape.gradient(loss, params))
    for p in params:
        p.requires_grad = False


# --- losses ---------------------------------------------------------------

class AdversarialDV:
    """Neural DV backend inside the training loss.

    One statistics network per MI call site, created on first use. Each
    forward pass collects the bounds so the trainer can push every network
    toward a tighter bound independently of the sign the bound has in the
    loss.
    """

    backend = "neural_dv"

    def __init__(self, seed):
        self.seed = seed
        self.nets = []
        self.bounds = []
        self._calls = 0

    def reset(self):
        self.bounds = []
        self._calls = 0

    def mi(self, x, y):
        if self._calls == len(self.nets):
            self.nets.append(hfs.NeuralDV(x.shape[-1], y.shape[-1], seed=self.seed * 131 + self._calls))
        net = self.nets[self._calls]
        self._calls += 1
        b = net.bound(x, y)
        self.bounds.append(b)
        return b

    def entropy(self, x):
        return hfs.entropy_gaussian(x)

    def parameters(self):
        return [p for net in self.nets for p in net.parameters()]


def make_loss_estimator(cfg):
    if cfg.hfs.mi_backend == "neural_dv":
        return AdversarialDV(cfg.run.seed)
    return hfs.GaussianMI()


def _mi1(out, cfg, est):
    F_d, F_n, F_e = out["F_d"], out["F_n"], out["F_e"]
    l0, l1, l2, l3 = cfg.hfs.mi_weights
    if F_e is not None:
        return hfs.loss_mi1(F_d, F_n, F_e, (l0, l1, l2, l3), est)
    if F_n is not None:
        return nk.scale(est.mi(hfs._samples(F_d), hfs._samples(F_n)), l0)
    return None


def loss_terms(model, out, y, cfg, est=None):
    """Unweighted value of each enabled loss term (None when absent)."""
    st, w = cfg.stages, cfg.loss
    est = est or hfs.GaussianMI()
    terms = dict.fromkeys(TERMS)
    terms["cls"] = ad.bce_with_logits(out["logit"], y)
    if st.first_level and out["F_n"] is not None and w.w_orth:
        orth = hfs.orth_loss if cfg.hfs.orth_form == "literal" else hfs.orth_loss_cosine
        terms["orth"] = orth(out["F_d"], out["F_n"])
    if st.first_level and w.w_mi1:
        terms["mi1"] = _mi1(out, cfg, est)
    if st.second_level and out["F_eNonDep"] is not None and w.w_mi2:
        terms["mi2"] = hfs.loss_mi2(out["F_eDep"], out["F_eNonDep"], out["F_d"], est)
    if st.graph_reg_1 and w.w_graph:
        nodes = out["graph_updated"] if st.graph_update_1 else out["graph_nodes"]
        types = [nodes[k] for k in ("d", "n", "e") if k in nodes]
        terms["graph"] = dcr.loss_graph(types, cfg.dcr.lam, cfg.dcr.cross_sign)
    if st.graph_reg_2 and out["F_eNonDep_prime"] is not None and w.w_flow:
        terms["flow"] = dcr.loss_flow(out["F_eDep_prime"], out["F_eNonDep_prime"], cfg.dcr.mu)
    if out["teacher"] is not None and w.w_distill:
        terms["distill"] = ad.distill_losses(out["teacher"], out["student"],
                                             model.gru.student_to_teacher, cfg.ad.tau)[2]
    if out["F_n"] is not None and w.w_adv:
        pooled = nk.grad_reverse(nk.mean(out["F_n"], axis=-2), cfg.hfs.reversal_strength)
        z = model.noise_adversary(pooled)
        terms["adv"] = ad.bce_with_logits(nk.reshape(z, z.shape[:-1]), y)
    return terms


def total_loss(model, out, y, cfg, est=None):
    """Weighted sum of the enabled terms and the per-term weighted breakdown.

    Raises TrainingError naming the first non-finite term.
    """
    terms = loss_terms(model, out, y, cfg, est)
    total = None
    breakdown = {}
    for name in TERMS:
        t = terms[name]
        if t is None:
            continue
        if not np.isfinite(t.value):
            raise TrainingError(f"loss term {name!r} is not finite", {"term": name, "value": float(t.value)})
        contrib = nk.scale(t, getattr(cfg.loss, "w_" + name))
        breakdown[name] = float(contrib.value)
        total = contrib if total is None else nk.add(total, contrib)
    breakdown["total"] = float(total.value)
    return total, breakdown


# --- main loop ------------------------------------------------------------

def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def evaluate(model, seqs, cfg):
    x, y = stack(seqs) if seqs else (None, None)
    if not seqs:
        raise ParameterError("cannot evaluate on empty data")
    p = predict_proba(model, x, cfg.stages, cfg.dcr, cfg.ad.beta)
    return metrics_from_predictions(y, p >= 0.5)


@dataclass
class FitResult:
    model: object
    checkpoint: object
    history: list = field(default_factory=list)
    best_epoch: int = 0
    pretrain_history: list = field(default_factory=list)


def build_model(cfg):
    model = RecalibNet(make_rng(cfg.run.seed, "init"), cfg.widths)
    for p in model.gru.teacher_parameters():
        p.requires_grad = False
    return model


def _snapshot(model):
    return {name: p.value.copy() for name, p in model.named_parameters()}


def _restore(model, snap):
    for name, p in model.named_parameters():
        p.value[...] = snap[name]


def fit(cfg, data=None, log=None):
    """Stage 0, then joint training with early stopping on validation F1."""
    cfg = cfg.validate()
    train, val, _ = data if data is not None else make_data(cfg)
    model = build_model(cfg)
    pre = []
    if cfg.stages.emotion_stream:
        pre = pretrain_emotion(model, train, val, cfg)
        fit_posterior_head(model, train, cfg)
    for p in model.frozen_parameters():
        p.requires_grad = False

    est = make_loss_estimator(cfg)
    x, y = stack(train)
    params = model.trainable_parameters(cfg.stages)
    o = cfg.optim
    if isinstance(est, AdversarialDV):
        forward_loss(model, x[: o.batch_size], y[: o.batch_size], cfg, est)
    est_params = est.parameters()
    opt = Adam(params, lr=o.lr, betas=(o.beta1, o.beta2))
    est_opt = Adam(est_params, lr=o.lr, betas=(o.beta1, o.beta2), ascent=est_params) if est_params else None

    history = []
    val_m = evaluate(model, val, cfg)
    history.append(_history_row(0, {}, val_m))
    best_f1, best_epoch, best = val_m.f1, 0, _snapshot(model)
    stale = 0
    last_good = best
    for epoch in range(1, o.epochs + 1):
        rng = make_rng(cfg.run.seed, "batches", epoch)
        sums, count = {}, 0
        for idx in _batches(len(train), o.batch_size, rng):
            try:
                with nk.Tape() as tape:
                    loss, parts = forward_loss(model, x[idx], y[idx], cfg, est)
                    bound_sum = None
                    if est_opt is not None:
                        bound_sum = est.bounds[0]
                        for b in est.bounds[1:]:
                            bound_sum = nk.add(bound_sum, b)
            except TrainingError as exc:
                _restore(model, last_good)
                exc.diagnostics.update(epoch=epoch, last_finite="restored into the returned model")
                raise
            grads = tape.gradient(loss, params)
            if est_opt is not None:
                est_opt.step([-g for g in tape.gradient(bound_sum, est_params)])
            if not all(np.all(np.isfinite(g)) for g in grads):
                _restore(model, last_good)
                raise TrainingError("non-finite gradient", {"epoch": epoch, "breakdown": parts})
            opt.step(grads)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            count += len(idx)
        last_good = _snapshot(model)
        mean_parts = {k: v / count for k, v in sums.items()}
        val_m = evaluate(model, val, cfg)
        history.append(_history_row(epoch, mean_parts, val_m))
        if log:
            log(f"epoch {epoch:3d} loss {mean_parts.get('total', float('nan')):.4f} val f1 {val_m.f1:.3f}")
        if val_m.f1 > best_f1:
            best_f1, best_epoch, best = val_m.f1, epoch, _snapshot(model)
            stale = 0
        else:
            stale += 1
            if stale >= o.patience:
                break
    _restore(model, best)
    best_row = history[best_epoch]
    ckpt = Checkpoint(best, cfg.to_text(), best_epoch,
                      {"val_" + k: best_row[k] for k in ("accuracy", "precision", "recall", "f1")})
    return FitResult(model, ckpt, history, best_epoch, pre)


def forward_loss(model, xb, yb, cfg, est):
    if hasattr(est, "reset"):
        est.reset()
    out = forward(model, xb, cfg.stages, cfg.dcr, cfg.ad.beta, cfg.ad.tau)
    return total_loss(model, out, yb, cfg, est)


def _history_row(epoch, parts, metrics):
    row = {"epoch": epoch, "split": "val"}
    for name in TERMS + ("total",):
        row["loss_" + name] = parts.get(name, 0.0)
    row.update(metrics.as_dict())
    return row


HISTORY_COLUMNS = ("epoch", "split") + tuple("loss_" + t for t in TERMS + ("total",)) + (
    "accuracy", "precision", "recall", "f1")
CSV_VERSION = "# recalib-csv v1"


def write_csv(path_or_buf, columns, rows):
    """CSV with a version comment line, a header row and ``repr``-exact floats."""
    own = isinstance(path_or_buf, str) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        fh.write(CSV_VERSION + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])
    finally:
        if own:
            fh.close()


def read_csv(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(io.StringIO("".join(lines))))


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_history(path, history):
    write_csv(path, HISTORY_COLUMNS, history)


# --- naive-fusion baseline ------------------------------------------------

def fit_naive(cfg, emotion_encoder, data, epochs=None):
    """Train the concatenation baseline with BCE only, keeping the best validation F1."""
    train, val, _ = data
    model = NaiveFusion(make_rng(cfg.run.seed, "naive"), emotion_encoder, cfg.widths)
    params = model.trainable_parameters()
    o = cfg.optim
    opt = Adam(params, lr=o.lr, betas=(o.beta1, o.beta2))
    x, y = stack(train)
    xv, yv = stack(val)

    def val_f1():
        return metrics_from_predictions(yv, naive_predict_proba(model, xv) >= 0.5).f1

    best_f1, best, stale = val_f1(), _snapshot(model), 0
    for epoch in range(1, (o.epochs if epochs is None else epochs) + 1):
        rng = make_rng(cfg.run.seed, "naive_batches", epoch)
        for idx in _batches(len(train), o.batch_size, rng):
            with nk.Tape() as tape:
                loss = ad.bce_with_logits(model.logit(x[idx]), y[idx])
            opt.step(tape.gradient(loss, params))
        f1 = val_f1()
        if f1 > best_f1:
            best_f1, best, stale = f1, _snapshot(model), 0
        else:
            stale += 1
            if stale >= o.patience:
                break
    _restore(model, best)
    return model


def evaluate_naive(model, seqs):
    x, y = stack(seqs)
    return metrics_from_predictions(y, naive_predict_proba(model, x) >= 0.5)


# --- checkpoints ----------------------------------------------------------

CKPT_MAGIC = b"RCKP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict
    config_text: str
    epoch: int = 0
    metrics: dict = field(default_factory=dict)

    @property
    def config(self):
        return ExperimentConfig.from_text(self.config_text)


def save_checkpoint(path, ckpt):
    """Named little-endian float64 blocks, the config text, then a JSON metadata block."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHI", CKPT_MAGIC, CKPT_VERSION, len(ckpt.params)))
        for name in sorted(ckpt.params):
            arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        for blob in (ckpt.config_text.encode("utf-8"),
                     json.dumps({"epoch": ckpt.epoch, "metrics": ckpt.metrics}, sort_keys=True).encode("utf-8")):
            fh.write(struct.pack("<I", len(blob)) + blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, version, n = struct.unpack_from("<4sHI", buf, 0)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = struct.calcsize("<4sHI")
    params = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    blobs = []
    for _ in range(2):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        blobs.append(buf[pos:pos + ln].decode("utf-8"))
        pos += ln
    meta = json.loads(blobs[1])
    return Checkpoint(params, blobs[0], meta["epoch"], meta["metrics"])


def model_from_checkpoint(ckpt):
    cfg = ckpt.config
    model = build_model(cfg)
    _restore(model, ckpt.params)
    for p in model.frozen_parameters():
        p.requires_grad = False
    return model, cfg
