"""Deterministic random streams derived from a single run seed.

Every stochastic component (init, shuffling, dropout, Monte Carlo draws)
pulls its own named stream so that runs are reproducible bit-for-bit and
components never share state.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *tags) -> np.random.Generator:
    """Generator for (seed, *tags); tags may be strings or ints."""
    words = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            words.append(zlib.crc32(t.encode("utf-8")))
        else:
            words.append(int(t) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))
