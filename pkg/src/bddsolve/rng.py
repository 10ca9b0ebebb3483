"""Seed handling: every randomized routine takes an explicit seed."""

import numpy as np


def as_generator(seed):
    """PCG64 generator from an int, a SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def child_seeds(seed, count):
    """Independent child SeedSequences derived deterministically from ``seed``."""
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    elif isinstance(seed, np.random.Generator):
        ss = np.random.SeedSequence(int(seed.integers(2**63)))
    else:
        ss = np.random.SeedSequence(seed)
    return ss.spawn(count)
