"""Named, order-independent random sub-streams.

Every stream is a PCG64 bit generator seeded from ``SeedSequence(seed,
spawn_key=keys)``. String keys are mapped to integers with CRC-32, so
``substream(7, "rep", 3)`` is the same sequence no matter which other
streams were created before it. Gaussian variates come from numpy's
ziggurat sampler and Student-t variates from ``Generator.standard_t``; the
(seed, keys) -> sequence contract is therefore that of numpy's
``Generator`` API for the installed numpy version.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError("sub-stream keys must be non-negative")
    return k


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))


def substream(seed: int, *keys) -> np.random.Generator:
    """Generator for the sub-stream of ``seed`` named by ``keys``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit integer seed for the named sub-stream (safe to write to CSV)."""
    state = seed_sequence(seed, *keys).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))
