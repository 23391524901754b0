"""Named, reproducible random streams derived from a single root seed.

Every consumer asks for a stream by a path such as ``("shuffle", rep, k)``.
Paths are hashed into a :class:`numpy.random.SeedSequence` spawn key, so two
different paths give statistically independent generators and the same path
always gives the same generator, regardless of the order streams are created.
"""

from __future__ import annotations

import hashlib

import numpy as np

PathItem = int | str


def _token(item: PathItem) -> int:
    if isinstance(item, bool):
        raise TypeError("stream path items must be int or str, not bool")
    if isinstance(item, (int, np.integer)):
        if item < 0:
            raise ValueError("stream path integers must be nonnegative")
        # keep integers and hashed names in disjoint ranges
        return 2 * int(item)
    if isinstance(item, str):
        digest = hashlib.blake2b(item.encode("utf-8"), digest_size=8).digest()
        return 2 * int.from_bytes(digest, "big") + 1
    raise TypeError(f"unsupported stream path item {item!r}")


def seed_sequence(seed: int, *path: PathItem) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(_token(p) for p in path))


def stream(seed: int, *path: PathItem) -> np.random.Generator:
    """Return the generator for ``path`` under root ``seed``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *path)))
