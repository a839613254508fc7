"""Deterministic named RNG substreams.

Every source of randomness in the simulator is a generator derived from the
root experiment seed plus a string/int key path ("client", 3), ("server",
"diffusion"), etc.  Substreams are independent of the order in which they are
created, which is what makes runs reproducible across worker counts: each
client / round / purpose gets the same stream no matter how work is
scheduled.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(parts: tuple) -> list[int]:
    joined = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(joined.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def substream(seed: int, *parts) -> np.random.Generator:
    """Generator uniquely determined by (seed, *parts)."""
    entropy = [int(seed) & 0xFFFFFFFF, *_key_words(parts)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
