"""Named random streams.

Every source of randomness in an experiment (mask, parameter init, peer draws,
edge dropout) gets its own generator derived from ``(seed, name)``, so switching
one component on or off never shifts the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
