"""Keyed, platform-independent random number streams.

Every stochastic element of the pipeline (shuffling, augmentation
parameters, dropout masks) draws from a generator derived from an
explicit integer key tuple instead of global RNG state.  Identical keys
yield identical streams on any platform and under any execution order,
which is what makes parallel data loading and re-runs byte-reproducible.
"""

from __future__ import annotations

import numpy as np

# Namespace tags keep the key spaces of independent consumers disjoint.
# Sample indices are always < 2**31, so these can never collide with a
# (seed, epoch, sample_index) augmentation key.
SHUFFLE_TAG = 0x7FFF_0001
DROPOUT_TAG = 0x7FFF_0002

RngKey = tuple[int, ...]


def keyed_rng(*key: int) -> np.random.Generator:
    """Return a Generator fully determined by the integer key tuple."""
    return np.random.default_rng(np.random.SeedSequence(key))
