"""Named random streams derived from one master seed.

A stream is identified by ``(master seed, component name, index)``; the name
is hashed with CRC32 so the derivation is stable across processes and Python
versions. No code in the package touches global random state.
"""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_seed_sequence(seed: int, name: str, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(stream_key(name), int(index)))


def derive_rng(seed: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(seed, name, index))
