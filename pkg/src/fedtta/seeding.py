"""Deterministic RNG streams derived from a master seed plus tags.

Every stochastic site in the simulator draws from its own stream keyed by
(master seed, site name, ids...). Concurrency therefore cannot change any
result, and identical configs reproduce byte-identical outputs.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_int(tag) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8")) & 0xFFFFFFFF
    return int(tag) & 0xFFFFFFFF


def rng_for(master_seed: int, *tags) -> np.random.Generator:
    entropy = [int(master_seed) & 0xFFFFFFFF] + [_tag_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
