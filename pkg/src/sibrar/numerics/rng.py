"""Seeded random streams.

Streams are numpy ``Generator`` objects over the PCG64 bit generator, keyed
by a ``SeedSequence`` built from the integer seed plus optional tags. String
tags are folded to integers with CRC-32, so ``rng(7, "negatives", 3)`` names
one stable sub-stream of seed 7.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(t) -> int:
    if isinstance(t, str):
        return zlib.crc32(t.encode("utf-8"))
    t = int(t)
    if t < 0:
        raise ValueError("integer tags must be non-negative")
    return t


def rng(seed: int, *tags) -> np.random.Generator:
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *map(_tag, tags)])))


def derive_seed(seed: int, *tags) -> int:
    """A 32-bit integer seed deterministically derived from ``seed`` and tags."""
    return int(rng(seed, *tags).integers(0, 2**31 - 1))
