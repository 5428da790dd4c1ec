"""Seeded random streams.

Philox is a counter-based generator, so a (seed, stream key) pair always
yields the same draws regardless of what other streams consumed.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def make_rng(seed, *stream):
    """A Generator for ``seed`` and an optional named sub-stream.

    ``make_rng(7, "init", 3)`` is independent of ``make_rng(7, "data")`` and
    reproducible across runs.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(_key(p) for p in stream))
    return np.random.Generator(np.random.Philox(ss))
