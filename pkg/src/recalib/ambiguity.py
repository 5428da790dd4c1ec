"""Emotional-ambiguity rate and the burst-injection stress test.

A time step is ambiguous when an emotion-only classifier puts at least
``0.5 + tau`` probability on the wrong depression label. The rate is the
fraction of such steps in a sequence.

Step indices are 0-based throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ParameterError
from .synthgen import SADNESS

INTENSITY_LEVELS = {"none": 0.0, "low": 0.33, "medium": 0.66, "high": 1.0}


@dataclass(frozen=True)
class EmotionPosteriorTrack:
    posteriors: np.ndarray  # p(Y=1 | E_t) per step
    label: int

    def __post_init__(self):
        p = np.asarray(self.posteriors, dtype=float).reshape(-1)
        if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
            raise ParameterError("posteriors must lie in [0, 1]")
        if self.label not in (0, 1):
            raise ParameterError(f"label must be 0 or 1, got {self.label}")
        object.__setattr__(self, "posteriors", p)

    @property
    def T(self):
        return self.posteriors.shape[0]

    def opposite(self):
        """Probability assigned to the wrong label at each step."""
        return 1.0 - self.posteriors if self.label == 1 else self.posteriors


@dataclass(frozen=True)
class AmbiguityReport:
    tau: float
    ambiguous_steps: tuple
    ea_err: float


def _check_tau(tau):
    if not 0.0 < tau < 0.5:
        raise ParameterError(f"tau must lie in (0, 0.5), got {tau}")


def ambiguous_set(track, tau=0.2):
    """Steps where the wrong label gets probability >= 0.5 + tau (inclusive)."""
    _check_tau(tau)
    return tuple(int(t) for t in np.flatnonzero(track.opposite() >= 0.5 + tau))


def ea_err(track, tau=0.2):
    _check_tau(tau)
    if track.T == 0:
        raise ParameterError("ea_err of an empty track")
    return len(ambiguous_set(track, tau)) / track.T


def ambiguity_report(track, tau=0.2):
    steps = ambiguous_set(track, tau)
    if track.T == 0:
        raise ParameterError("ambiguity report of an empty track")
    return AmbiguityReport(float(tau), steps, len(steps) / track.T)


def burst_windows(T, count, duration, rng):
    """``count`` disjoint windows of ``duration`` frames, uniformly placed.

    Picks ``count`` sorted distinct slots out of ``T - count*(duration-1)``
    and spreads them out, so every non-overlapping placement is equally
    likely.
    """
    if count < 0 or duration < 1:
        raise ParameterError(f"need count >= 0 and duration >= 1, got {count}, {duration}")
    if count * duration >= T:
        raise ParameterError(f"{count} windows of {duration} frames do not fit in T={T}")
    if count == 0:
        return []
    slots = np.sort(rng.choice(T - count * (duration - 1), size=count, replace=False))
    starts = slots + np.arange(count) * (duration - 1)
    return [(int(s), int(s) + duration) for s in starts]


def inject_bursts(seq, intensity, count=3, duration=10, rng=None, emotion=SADNESS):
    """Copy of ``seq`` with ``count`` windows overwritten by a sadness burst.

    The old emotion contribution in each window is replaced (not added to),
    so the frames stay consistent with the updated emotion track. Label,
    depressive core and identity are untouched.
    """
    level = INTENSITY_LEVELS[intensity] if isinstance(intensity, str) else float(intensity)
    if not 0.0 <= level <= 1.0:
        raise ParameterError(f"intensity must lie in [0, 1], got {level}")
    windows = burst_windows(seq.T, count, duration, rng if rng is not None else np.random.default_rng(0))
    f = seq.factors.copy()
    frames = seq.frames.copy()
    if not windows:
        return replace(seq, frames=frames, factors=f)
    mask = np.zeros(seq.T, dtype=bool)
    for a, b in windows:
        mask[a:b] = True
    old = seq.mixing.emotion_signal(f.emotion_class[mask], f.emotion_intensity[mask])
    f.emotion_class[mask] = emotion
    f.emotion_intensity[mask] = level
    new = seq.mixing.emotion_signal(f.emotion_class[mask], f.emotion_intensity[mask])
    frames[mask] += new - old
    f.injected_mask[mask] = True
    return replace(seq, frames=frames, factors=f)
