"""Seeded random streams.

All randomness goes through numpy's Philox generator, a 64-bit
counter-based bit generator. Streams are keyed by a tuple of non-negative
integers (e.g. ``(seed, case_index)``) through :class:`numpy.random.SeedSequence`,
so a given key always reproduces the same stream.
"""

import numpy as np


def make_rng(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))
