"""Seed derivation: one experiment seed fans out into independent streams."""

import zlib
from typing import Union

import numpy as np

SeedKey = Union[int, str]


def derive_seed(*keys: SeedKey) -> int:
    """
    Derive a 32-bit seed from a sequence of ints and strings.

    Strings are hashed with CRC32 so that the result does not depend on
    Python's per-process hash randomization.
    """
    entropy = []
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode()))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
