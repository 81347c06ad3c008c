"""Seeded random streams.

All randomness goes through numpy's PCG64 bit generator keyed by a
``SeedSequence([seed, *keys])``. PCG64 output is specified bit-for-bit, so a
given (seed, keys) produces the same stream on every platform.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def make_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for ``seed`` and a tuple of stream keys."""
    entropy = [int(seed) & MASK64]
    for k in keys:
        if isinstance(k, str):
            entropy.extend(k.encode("utf-8"))
        else:
            entropy.append(int(k) & MASK64)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
