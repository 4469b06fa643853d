"""Labeled random sub-streams fanned out from one root seed.

Every consumer (init, data-shuffle, attack-start, assignment, ...) draws
from its own stream keyed by a label and optional integer coordinates, so
adding a new consumer never shifts the numbers another one sees.
"""

import zlib

import numpy as np


def _key(label, keys):
    return (zlib.crc32(label.encode("utf-8")),) + tuple(int(k) for k in keys)


def substream(seed, label, *keys):
    """Return a fresh Generator for ``(seed, label, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_key(label, keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed, label, *keys):
    """Return a 63-bit integer seed for ``(seed, label, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_key(label, keys))
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return (int(hi) << 31) | (int(lo) >> 1)
