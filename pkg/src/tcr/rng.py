"""Seeded random streams.

Every stochastic routine in the package draws from a Philox generator keyed by
a master seed plus an optional tuple of stream indices, so that e.g. the batch
for intervention ``l`` of restart ``r`` is reproducible on its own.
"""

import numpy as np

RNG_ALGORITHM = "numpy.Philox4x64"


def make_rng(seed, *stream):
    if seed is None:
        raise ValueError("an explicit integer seed is required")
    entropy = [int(seed)] + [int(s) for s in stream]
    if any(e < 0 for e in entropy):
        raise ValueError(f"seeds must be non-negative, got {entropy}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed, *stream):
    """Return a 63-bit integer seed derived from ``(seed, *stream)``."""
    return int(make_rng(seed, *stream).integers(0, 2**63 - 1))
