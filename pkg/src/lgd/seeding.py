"""Named random sub-streams derived from one master seed."""

import zlib

import numpy as np


def stream(seed, name):
    """Generator for the sub-stream ``name`` of master ``seed``.

    Streams with different names are statistically independent, so one
    component's draws never shift another's.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())]))
