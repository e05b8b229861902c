"""Seeded random-number substreams.

Every source of randomness in the project draws from one root seed through a
named substream, so that e.g. reordering data loading cannot shift the masking
pattern, and two runs with the same root seed are bit-identical.
"""

import hashlib

import numpy as np


def _key_entropy(key: str) -> int:
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


def substream(root_seed: int, *keys) -> np.random.Generator:
    """Return a Generator for the substream named by ``keys`` under ``root_seed``.

    Keys may be strings or integers; the same (root_seed, keys) always yields
    the same stream, independent of call order or platform.
    """
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, int):
            entropy.append(key & 0xFFFFFFFFFFFFFFFF)
        else:
            entropy.append(_key_entropy(str(key)))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
