"""Deterministic seed derivation.

Every stochastic component derives its own stream from a single root seed
plus a tuple of labels, so one knob reproduces a whole run and independent
components never share a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    """Hash (root, labels...) into a 63-bit seed."""
    text = repr((int(root),) + tuple(labels)).encode()
    digest = hashlib.sha256(text).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def generator(root: int, *labels) -> np.random.Generator:
    """PCG64 generator seeded from a derived seed."""
    return np.random.Generator(np.random.PCG64(derive_seed(root, *labels)))
