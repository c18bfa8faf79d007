"""Reproducible random number generation for Monte Carlo replicates.

All randomness flows through counter-based Philox generators keyed by a
64-bit seed.  Replicate k of a study uses the derived key

    child_seed(seed, k) = splitmix64(seed XOR splitmix64(GOLDEN + k))

so replicates are independent streams that can be regenerated one at a
time from the (seed, k) pair recorded in a report's seed ledger.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One round of the splitmix64 mixing function (64-bit avalanche)."""
    x = (x + _GOLDEN) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def child_seed(seed: int, index: int) -> int:
    """Derive the seed of replicate `index` from the study seed."""
    return splitmix64((seed & _MASK64) ^ splitmix64((_GOLDEN + index) & _MASK64))


def generator(seed: int) -> np.random.Generator:
    """Philox generator for one seed (counter-based, 64-bit words)."""
    return np.random.Generator(np.random.Philox(key=seed & _MASK64))


def replicate_generator(seed: int, index: int) -> np.random.Generator:
    """Generator for replicate `index` of a study with base `seed`."""
    return generator(child_seed(seed, index))
