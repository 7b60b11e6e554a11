"""Deterministic seed derivation.

Every random stream in the package is keyed by a parent seed plus a tag path,
so any artifact can be regenerated from the seeds recorded next to it.
"""

import zlib

import numpy as np


def derive_seed(base: int, *keys) -> int:
    """Child 64-bit seed for ``base`` and a path of string/int keys."""
    entropy = [int(base) % 2**64]
    for k in keys:
        entropy.append(zlib.crc32(k.encode("utf-8")) if isinstance(k, str) else int(k) % 2**64)
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based generator for ``seed`` (optionally derived through ``keys``)."""
    return np.random.Generator(np.random.Philox(derive_seed(seed, *keys) if keys else int(seed) % 2**64))
