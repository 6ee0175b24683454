"""Seeded random streams.

Backed by numpy's PCG64 bit generator. ``split(label)`` derives an
independent child stream by appending a stable 64-bit key (BLAKE2b of the
label) to the parent's SeedSequence spawn key, so derivation does not depend
on how many numbers the parent has already drawn.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label: int | str) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit non-negative integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path))
        )

    def split(self, label: int | str) -> "Rng":
        return Rng(self.seed, self.path + (_label_key(label),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def poisson(self, lam, size=None):
        return self.generator.poisson(lam, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def get_state(self) -> dict:
        return {"seed": self.seed, "path": list(self.path), "bit_generator": self.generator.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["path"]))
        rng.generator.bit_generator.state = state["bit_generator"]
        return rng

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
