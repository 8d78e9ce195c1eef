"""Deterministic named random streams.

All stochastic code in the package draws from a numpy ``Generator`` backed
by the counter-based Philox bit generator.  A stream is addressed by a
``(seed, name)`` pair; the name is hashed into the Philox key, so streams
with different names are independent and any stream can be reproduced from
the master seed alone.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for (seed, name). Same pair, same sequence."""
    digest = hashlib.blake2s(name.encode("utf-8"), digest_size=8).digest()
    key = np.array(
        [np.uint64(seed % (1 << 64)), np.uint64(int.from_bytes(digest, "little"))],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def substream(seed: int, name: str, index: int) -> np.random.Generator:
    """Stream addressed by (seed, name, index), e.g. one per training step."""
    return stream(seed, f"{name}/{index}")
