"""Deterministic seed derivation.

All random streams are derived from explicit integer seeds with the
SplitMix64 finalizer, folded over a tuple of non-negative integers::

    h = 0x9E3779B97F4A7C15
    for x in (master, *indices):
        h = splitmix64(h ^ x)

The result is a 64-bit unsigned integer used to seed ``numpy.random.PCG64``.
Because every cell, block and replica gets its stream from its own
coordinates, results never depend on scheduling or worker count.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15

# stream tags, mixed in as the first index
TAG_CELL = 1
TAG_BLOCK = 2
TAG_DIVERSITY = 3
TAG_CAPACITY = 4
TAG_DEMAND = 5
TAG_DAMAGE = 6
TAG_REFERENCE = 7
TAG_COST = 8


def splitmix64(x):
    x = (x + _GOLDEN) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def mix_seed(master, *indices):
    """Fold ``master`` and ``indices`` into one 64-bit seed."""
    h = _GOLDEN
    for value in (master, *indices):
        value = int(value)
        if value < 0:
            raise ValueError("seed components must be non-negative")
        h = splitmix64(h ^ (value & _MASK))
    return h


def rng_from(master, *indices):
    return np.random.Generator(np.random.PCG64(mix_seed(master, *indices)))
