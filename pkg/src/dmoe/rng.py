"""Seeded Philox (counter-based) generators keyed by purpose."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``; ``stream`` parts may be ints or strings."""
    entropy = [_key(seed)] + [_key(p) for p in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *stream) -> int:
    """A 31-bit integer seed for ``(seed, *stream)``, for APIs that take plain ints."""
    return int(make_rng(seed, "derive", *stream).integers(0, 2**31 - 1))
