"""Synthetic multimodal sequences with known latent factors.

Each frame is a linear mix of three sources plus Gaussian noise::

    x_t = w_core * M_core @ core + w_emo * M_emo @ (onehot(e_t) * i_t) + w_id * M_id @ id_emb + noise

The depressive core is constant per sequence and only touches a designated
subset of channels; its class-conditional mean is what separates Y=1 from
Y=0. Depression also damps background emotion intensity ("blunted affect")
and tilts which background emotion is shown. Bursts are label-independent
windows of a random emotion at high intensity.

This mixing model is our own construction: nothing here claims clinical
fidelity.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ShapeError, ValidationError
from .numkit import make_rng

EMOTIONS = ("happiness", "sadness", "anger", "fear", "surprise", "disgust", "neutral")
HAPPINESS, SADNESS, NEUTRAL = 0, 1, 6
N_EMOTIONS = len(EMOTIONS)
N_BASIC = 6

# background emotion distributions per label, indexed like EMOTIONS
HEALTHY_BACKGROUND = (0.16, 0.10, 0.085, 0.085, 0.085, 0.085, 0.40)
DEPRESSED_BACKGROUND = (0.10, 0.16, 0.085, 0.085, 0.085, 0.085, 0.40)


@dataclass(frozen=True)
class GeneratorSpec:
    T: int = 60
    D: int = 32
    core_dim: int = 4
    core_channels: int = 12
    core_shift: float = 1.0
    core_std: float = 0.5
    core_weight: float = 1.0
    emotion_weight: float = 1.0
    identity_weight: float = 1.0
    background_intensity: tuple = (0.3, 0.6)
    blunting: float = 0.6
    healthy_background: tuple = HEALTHY_BACKGROUND
    depressed_background: tuple = DEPRESSED_BACKGROUND
    burst_rate: float = 0.15
    burst_duration: int = 6
    burst_intensity: tuple = (0.7, 1.0)
    n_identities: int = 20
    identity_dim: int = 8
    identity_jitter: float = 0.5
    noise_level: float = 0.5
    balanced: bool = True
    seed: int = 0

    def validate(self):
        for name in ("T", "D", "core_dim", "core_channels", "burst_duration", "n_identities", "identity_dim"):
            if getattr(self, name) <= 0:
                raise ValidationError(name, f"must be positive, got {getattr(self, name)}")
        if self.core_channels > self.D:
            raise ValidationError("core_channels", f"{self.core_channels} exceeds D={self.D}")
        if self.burst_duration >= self.T:
            raise ValidationError("burst_duration", f"must be < T={self.T}, got {self.burst_duration}")
        if not 0.0 <= self.burst_rate <= 1.0:
            raise ValidationError("burst_rate", f"must lie in [0, 1], got {self.burst_rate}")
        if self.noise_level < 0:
            raise ValidationError("noise_level", f"must be >= 0, got {self.noise_level}")
        if self.identity_jitter < 0:
            raise ValidationError("identity_jitter", f"must be >= 0, got {self.identity_jitter}")
        if self.core_std < 0:
            raise ValidationError("core_std", f"must be >= 0, got {self.core_std}")
        if not 0.0 <= self.blunting <= 1.0:
            raise ValidationError("blunting", f"must lie in [0, 1], got {self.blunting}")
        for name in ("background_intensity", "burst_intensity"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValidationError(name, f"need 0 <= lo <= hi <= 1, got {(lo, hi)}")
        for name in ("healthy_background", "depressed_background"):
            p = np.asarray(getattr(self, name), dtype=float)
            if p.shape != (N_EMOTIONS,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValidationError(name, "must be 7 nonnegative probabilities summing to 1")
        return self


@dataclass
class LatentFactors:
    depressive_core: np.ndarray
    identity_id: int
    identity_embedding: np.ndarray
    emotion_class: np.ndarray      # (T,) ints into EMOTIONS
    emotion_intensity: np.ndarray  # (T,) in [0, 1]
    burst_mask: np.ndarray         # (T,) bool, generator bursts
    injected_mask: np.ndarray      # (T,) bool, stress-test insertions
    noise_level: float

    def copy(self):
        return LatentFactors(
            self.depressive_core.copy(), self.identity_id, self.identity_embedding.copy(),
            self.emotion_class.copy(), self.emotion_intensity.copy(), self.burst_mask.copy(),
            self.injected_mask.copy(), self.noise_level,
        )


@dataclass(frozen=True)
class Mixing:
    """Channel loadings shared by every sequence of one generator."""

    core: np.ndarray      # D x core_dim
    emotion: np.ndarray   # D x N_EMOTIONS (neutral column is zero)
    identity: np.ndarray  # D x identity_dim
    weights: tuple = (1.0, 1.0, 1.0)

    def emotion_signal(self, cls, intensity):
        """Per-frame emotion contribution, shape (T, D)."""
        onehot = np.zeros((len(cls), N_EMOTIONS))
        onehot[np.arange(len(cls)), cls] = intensity
        return self.weights[1] * onehot @ self.emotion.T


@dataclass
class MultimodalSequence:
    frames: np.ndarray
    label: int
    factors: LatentFactors
    mixing: Mixing = field(repr=False)

    @property
    def frame_emotion_labels(self):
        return self.factors.emotion_class

    @property
    def T(self):
        return self.frames.shape[0]


class Generator:
    """Immutable sampler for one :class:`GeneratorSpec`."""

    def __init__(self, spec):
        self.spec = spec.validate()
        rng = make_rng(spec.seed, "mixing")
        core = np.zeros((spec.D, spec.core_dim))
        core[: spec.core_channels] = rng.normal(size=(spec.core_channels, spec.core_dim))
        emotion = rng.normal(size=(spec.D, N_EMOTIONS)) * 1.5
        emotion[:, NEUTRAL] = 0.0
        identity = rng.normal(size=(spec.D, spec.identity_dim)) / np.sqrt(spec.identity_dim) * 2.0
        self.mixing = Mixing(core, emotion, identity,
                             (spec.core_weight, spec.emotion_weight, spec.identity_weight))
        self.identity_table = make_rng(spec.seed, "identities").normal(size=(spec.n_identities, spec.identity_dim))
        direction = np.ones(spec.core_dim) / np.sqrt(spec.core_dim)
        self.core_means = (-spec.core_shift * direction, spec.core_shift * direction)

    def labels(self, n, offset=0):
        rng = make_rng(self.spec.seed, "labels", n, offset)
        if self.spec.balanced:
            return rng.permutation(np.arange(n) % 2)
        return rng.integers(0, 2, size=n)

    def sample_one(self, index, label):
        s = self.spec
        rng = make_rng(s.seed, "sequence", index)
        core = self.core_means[label] + s.core_std * rng.normal(size=s.core_dim)
        ident = int(rng.integers(s.n_identities))
        emb = self.identity_table[ident]
        if s.identity_jitter > 0:
            # session-to-session variation of the same person, on its own stream
            emb = emb + s.identity_jitter * make_rng(s.seed, "identity_jitter", index).normal(size=s.identity_dim)

        background = s.depressed_background if label == 1 else s.healthy_background
        bg_cls = int(rng.choice(N_EMOTIONS, p=np.asarray(background)))
        bg_int = rng.uniform(*s.background_intensity)
        if label == 1:
            bg_int *= s.blunting
        cls = np.full(s.T, bg_cls, dtype=np.int64)
        inten = np.full(s.T, bg_int if bg_cls != NEUTRAL else 0.0)

        burst = np.zeros(s.T, dtype=bool)
        n_slots = s.T // s.burst_duration
        hits = rng.random(n_slots) < s.burst_rate
        burst_cls = rng.integers(N_BASIC, size=n_slots)
        burst_int = rng.uniform(*s.burst_intensity, size=n_slots)
        for k in np.flatnonzero(hits):
            sl = slice(k * s.burst_duration, (k + 1) * s.burst_duration)
            burst[sl] = True
            cls[sl] = burst_cls[k]
            inten[sl] = burst_int[k]

        m = self.mixing
        static = m.weights[0] * m.core @ core + m.weights[2] * m.identity @ emb
        frames = static[None, :] + m.emotion_signal(cls, inten)
        if s.noise_level > 0:
            frames = frames + s.noise_level * rng.normal(size=(s.T, s.D))
        factors = LatentFactors(core, ident, emb.copy(), cls, inten, burst,
                                np.zeros(s.T, dtype=bool), s.noise_level)
        return MultimodalSequence(frames, int(label), factors, m)

    def generate(self, n, offset=0):
        """``n`` sequences; ``offset`` shifts the per-sequence seed index (disjoint test sets)."""
        if n < 0:
            raise ValidationError("n", f"must be >= 0, got {n}")
        ys = self.labels(n, offset)
        return [self.sample_one(offset + i, int(y)) for i, y in enumerate(ys)]


def generate(spec, n, offset=0):
    return Generator(spec).generate(n, offset=offset)


def spec_from_dict(values):
    """Build a GeneratorSpec from string-or-typed values, naming bad fields."""
    kwargs = {}
    types = {f.name: f for f in fields(GeneratorSpec)}
    defaults = GeneratorSpec()
    for key, raw in values.items():
        if key not in types:
            raise ValidationError(key, "unknown generator field")
        default = getattr(defaults, key)
        try:
            if isinstance(default, bool):
                val = raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                val = int(raw)
            elif isinstance(default, float):
                val = float(raw)
            elif isinstance(default, tuple):
                val = tuple(float(v) for v in (raw.split(",") if isinstance(raw, str) else raw))
            else:
                val = raw
        except (TypeError, ValueError) as exc:
            raise ValidationError(key, f"cannot parse {raw!r}: {exc}") from None
        kwargs[key] = val
    return replace(defaults, **kwargs).validate()


def recombine_chimera(a, b, core_from="A"):
    """Swap the depression core and emotion shell between two subjects.

    ``a`` and ``b`` are :class:`recalib.hfs.StreamFeatures`. The core source
    supplies ``F_d`` and ``F_n``; the other subject supplies ``F_e`` and its
    split.
    """
    from .hfs import StreamFeatures

    if core_from not in ("A", "B"):
        raise ValueError(f"core_from must be 'A' or 'B', got {core_from!r}")
    for name in ("F_d", "F_n", "F_e", "F_eDep", "F_eNonDep"):
        sa, sb = np.shape(getattr(a, name)), np.shape(getattr(b, name))
        if sa != sb:
            raise ShapeError(f"{name} shapes differ: {sa} vs {sb}")
    core, shell = (a, b) if core_from == "A" else (b, a)
    return StreamFeatures(core.F_d, core.F_n, shell.F_e, shell.F_eDep, shell.F_eNonDep)


# --- binary container ---------------------------------------------------------

MAGIC = b"RCSQ"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIIII")
_F8 = np.dtype("<f8")


def write_container(path, sequences):
    """Write sequences sharing one mixing to the little-endian binary container.

    Layout: header (magic, version, T, D, n, core_dim, n_emotions, id_dim),
    the shared mixing block, then per sequence a label byte, the factor block
    and the row-major frames.
    """
    if not sequences:
        raise ValueError("cannot write an empty container")
    first = sequences[0]
    T, D = first.frames.shape
    m = first.mixing
    kc, ki = m.core.shape[1], m.identity.shape[1]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, T, D, len(sequences), kc, N_EMOTIONS, ki))
        fh.write(np.asarray(m.weights, dtype=_F8).tobytes())
        for block in (m.core, m.emotion, m.identity):
            fh.write(np.ascontiguousarray(block, dtype=_F8).tobytes())
        for seq in sequences:
            if seq.frames.shape != (T, D):
                raise ShapeError(f"frame shape {seq.frames.shape} differs from ({T}, {D})")
            f = seq.factors
            flags = f.burst_mask.astype(np.uint8) | (f.injected_mask.astype(np.uint8) << 1)
            fh.write(struct.pack("<BId", seq.label, f.identity_id, f.noise_level))
            fh.write(np.asarray(f.depressive_core, dtype=_F8).tobytes())
            fh.write(np.asarray(f.identity_embedding, dtype=_F8).tobytes())
            fh.write(f.emotion_class.astype(np.uint8).tobytes())
            fh.write(np.asarray(f.emotion_intensity, dtype=_F8).tobytes())
            fh.write(flags.tobytes())
            fh.write(np.ascontiguousarray(seq.frames, dtype=_F8).tobytes())


def read_container(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, version, T, D, n, kc, ne, ki = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a sequence container (magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    pos = _HEADER.size

    def take(count, dtype=_F8):
        nonlocal pos
        dt = np.dtype(dtype)
        arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).copy()
        pos += count * dt.itemsize
        return arr

    weights = tuple(take(3))
    core = take(D * kc).reshape(D, kc)
    emotion = take(D * ne).reshape(D, ne)
    identity = take(D * ki).reshape(D, ki)
    mixing = Mixing(core, emotion, identity, weights)
    out = []
    rec = struct.Struct("<BId")
    for _ in range(n):
        label, ident, noise = rec.unpack_from(buf, pos)
        pos += rec.size
        core_v = take(kc)
        emb = take(ki)
        cls = take(T, np.uint8).astype(np.int64)
        inten = take(T)
        flags = take(T, np.uint8)
        frames = take(T * D).reshape(T, D)
        factors = LatentFactors(core_v, int(ident), emb, cls, inten, (flags & 1).astype(bool),
                                ((flags >> 1) & 1).astype(bool), float(noise))
        out.append(MultimodalSequence(frames, int(label), factors, mixing))
    return out


def export_csv(path, sequences):
    """One row per frame, for eyeballing in a spreadsheet."""
    D = sequences[0].frames.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seq", "t", "label", "identity", "emotion", "intensity", "burst", "injected"]
                   + [f"x{j}" for j in range(D)])
        for i, seq in enumerate(sequences):
            f = seq.factors
            for t in range(seq.T):
                w.writerow([i, t, seq.label, f.identity_id, EMOTIONS[f.emotion_class[t]],
                            repr(float(f.emotion_intensity[t])), int(f.burst_mask[t]),
                            int(f.injected_mask[t])] + [repr(float(v)) for v in seq.frames[t]])
