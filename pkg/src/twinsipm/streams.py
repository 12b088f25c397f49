"""Deterministic random streams.

Every random quantity in a simulation is drawn from a generator keyed by
``(master_seed, *key)``, so results do not depend on the order in which
work units run or on how many workers run them.
"""
from __future__ import annotations

import zlib

import numpy as np


def as_generator(rng=None) -> np.random.Generator:
    """Coerce ``None``, an int seed or a Generator into a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def tag(name: str) -> int:
    """Stable integer tag for a stream name (independent of PYTHONHASHSEED)."""
    return zlib.crc32(name.encode("utf-8"))


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Generator for the sub-stream ``key`` of ``master_seed``."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(seq))
