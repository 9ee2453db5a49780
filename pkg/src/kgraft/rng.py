"""Seeded random streams.

Every stochastic operation takes an explicit ``numpy.random.Generator``.
Streams come from Philox (counter based) keyed by a ``SeedSequence`` built
from the run seed plus stream labels, so independent consumers never share
state and adding a consumer never shifts another one's draws.
"""

import zlib

import numpy as np


def _label_key(label):
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def make_rng(seed, *labels):
    """Generator for ``seed`` restricted to the stream named by ``labels``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_label_key(x) for x in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
