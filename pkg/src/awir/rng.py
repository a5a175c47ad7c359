"""Counter-based seeding: every random decision is keyed by (seed, purpose, indices).

Derived generators make dataset builds, weight init, and training order
reproducible regardless of evaluation order or worker count, and make
checkpoint resume trivial (no generator state to serialize).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# FNV-1a offset/prime, used to fold string tags into the stream key.
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(x: int) -> int:
    """One splitmix64 step; full-period 64-bit mixer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, *tags: int | str) -> int:
    """Mix a base seed with a sequence of string/int tags into a 64-bit key."""
    h = splitmix64(seed & _MASK64)
    for tag in tags:
        if isinstance(tag, str):
            f = _FNV_OFFSET
            for b in tag.encode("utf-8"):
                f = ((f ^ b) * _FNV_PRIME) & _MASK64
            h = splitmix64(h ^ f)
        else:
            h = splitmix64(h ^ (int(tag) & _MASK64))
    return h


def rng_for(seed: int, *tags: int | str) -> np.random.Generator:
    """A numpy Generator deterministically derived from (seed, *tags)."""
    return np.random.default_rng(derive_key(seed, *tags))


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash of a byte string."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h
