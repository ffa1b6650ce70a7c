"""Named, counter-based random streams derived from one integer seed."""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Philox generator keyed by ``(seed, crc32(name))``.

    Distinct names give independent streams, so adding a new consumer never
    shifts the numbers drawn by an existing one.
    """
    key = (int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8")))
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))
