"""Deterministic named random streams.

Every source of randomness in the project (weight init, dataset synthesis,
batch sampling) draws from a stream derived from a single master seed plus a
string name, so runs are reproducible across processes and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *names: str) -> np.random.Generator:
    """Return an independent generator for (seed, names).

    The sub-stream seed is derived with SHA-256 rather than Python's salted
    hash() so identical (seed, names) give identical streams in any process.
    """
    tag = ":".join(str(n) for n in names)
    digest = hashlib.sha256(f"{seed}/{tag}".encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
