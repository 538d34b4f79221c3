"""Splittable, counter-based random streams.

Each stream is addressed by a seed plus a path of names/integers, e.g.
``RNG(7).child("enc.block0.ffn1.dropout").child(step)``.  The underlying
bit generator is Philox, so a stream is a pure function of its address and
dropout masks are reproducible per (layer, step) regardless of call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


class RNG:
    __slots__ = ("seed", "path")

    def __init__(self, seed: int = 0, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def child(self, *parts) -> "RNG":
        return RNG(self.seed, self.path + tuple(parts))

    def generator(self) -> np.random.Generator:
        entropy = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
        ss = np.random.SeedSequence(entropy, spawn_key=tuple(_key(p) for p in self.path))
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self):
        return f"RNG(seed={self.seed}, path={self.path!r})"
