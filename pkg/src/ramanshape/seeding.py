"""Order-independent child seeds derived from a single 64-bit master seed.

Every stochastic consumer (dataset sample ``i``, evaluation pass, DE
candidate, ...) draws from ``numpy.random.default_rng(child_seed(...))``.
Seeds are produced with the SplitMix64 finalizer::

    z = (master + GAMMA * (index + 1)) mod 2**64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

The finalizer is a bijection on 64-bit integers and GAMMA is odd, so the
seeds of indices ``0 .. 2**64 - 1`` under one master are pairwise distinct.
A ``stream`` tag first remixes the master so that independent consumers
(e.g. dataset noise vs. evaluation noise) never share a sequence.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15

STREAM_DATASET = 0
STREAM_SPLIT = 1
STREAM_TRAIN = 2
STREAM_EVALUATE = 3
STREAM_DE = 4


def splitmix64(z):
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def child_seed(master, index, stream=0):
    """Seed for item ``index`` of ``stream`` under ``master`` (all ints)."""
    base = master & MASK64
    if stream:
        base = splitmix64(base ^ splitmix64(GAMMA * stream))
    return splitmix64(base + GAMMA * (index + 1))


def child_rng(master, index, stream=0):
    return np.random.default_rng(child_seed(master, index, stream))
