"""Deterministic RNG derivation from mixed int/str keys."""

import zlib

import numpy as np


def _as_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode())
    raise TypeError(f"unsupported seed key type {type(key)!r}")


def seeded_rng(*keys) -> np.random.Generator:
    """Generator derived stably (across runs and platforms) from the keys."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([_as_int(k) for k in keys])))
