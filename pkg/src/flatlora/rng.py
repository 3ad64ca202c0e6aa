"""Counter-based random streams.

A stream is a (key, counter) pair. Draw ``i`` of a stream is a pure function
of ``(key, counter + i)``, so any block of draws can be regenerated exactly
from two integers. Sub-streams are derived by hashing labels into the key.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import kernels

MASK64 = (1 << 64) - 1
_UNIFORM_SALT = 0x5DEECE66D2B7E151


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def label_hash(label) -> int:
    """Platform-stable 64-bit hash of an int or str label."""
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        return splitmix64(int(label) & MASK64)
    if isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream labels must be int or str, got {type(label).__name__}")


def derive_key(seed: int, *labels) -> int:
    h = splitmix64(int(seed) & MASK64)
    for lab in labels:
        h = splitmix64(h ^ label_hash(lab))
    return h


@dataclass
class RngStream:
    seed: int
    counter: int = 0

    def __post_init__(self):
        if not 0 <= self.seed <= MASK64 or not 0 <= self.counter <= MASK64:
            raise ValueError("seed and counter must be unsigned 64-bit integers")

    def child(self, *labels) -> "RngStream":
        """Disjoint sub-stream named by ``labels`` (counter restarts at 0)."""
        return RngStream(derive_key(self.seed, *labels), 0)

    def normal(self, count: int) -> np.ndarray:
        return seeded_normal(self, count)

    def uniform(self, count: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        if count < 0:
            raise ValueError("count must be >= 0")
        # uniforms come from a salted key so they never alias normal draws
        u = kernels.counter_uniforms(splitmix64(self.seed ^ _UNIFORM_SALT), self.counter, count)
        self.counter += count
        return low + (high - low) * u

    def label(self) -> tuple[int, int]:
        return (self.seed, self.counter)


def seeded_normal(stream: RngStream, count: int) -> np.ndarray:
    """i.i.d. N(0, 1) draws; advances ``stream.counter`` by ``count``."""
    if count < 0:
        raise ValueError("count must be >= 0")
    out = kernels.counter_normals(stream.seed, stream.counter, count)
    stream.counter += count
    return out
