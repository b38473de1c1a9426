"""Deterministic seed derivation.

Every source of randomness in the package flows from a single user seed
through SeedSequence with an integer path, so that parallel and serial
runs (and re-runs on any thread count) agree exactly.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def child_seed(seed: int, *path: int) -> int:
    """Derive a 64-bit child seed from `seed` and an integer path."""
    entropy = [int(seed) & _MASK64] + [int(p) & _MASK64 for p in path]
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, np.uint64)[0])


def rng_from(seed: int, *path: int) -> np.random.Generator:
    """Generator seeded by `child_seed(seed, *path)`."""
    entropy = [int(seed) & _MASK64] + [int(p) & _MASK64 for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
