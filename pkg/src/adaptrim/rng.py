"""Deterministic random streams.

All randomness in the project flows through RngStream, a thin wrapper over
numpy's PCG64 generator seeded through SeedSequence. Identical seeds give
identical sample sequences across runs and platforms, and named child
streams let independent components (init, data, each training step) draw
without interfering with each other's sequences.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2s(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """PCG64-backed generator addressable by a (seed, *path) identity."""

    algorithm = "pcg64"

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self._path = _path
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *(_key_to_int(k) for k in _path)]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *keys) -> "RngStream":
        """Derive an independent stream named by `keys` (ints or strings)."""
        return RngStream(self.seed, self._path + tuple(keys))

    # -- draws ------------------------------------------------------------

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def gumbel(self, shape=()) -> np.ndarray:
        # -log(-log(U)) with U in (0,1); nudge away from 0 to keep logs finite.
        u = self._gen.random(shape)
        return -np.log(-np.log(np.maximum(u, 1e-300)))

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=replace)

    def shuffled(self, items):
        items = list(items)
        self._gen.shuffle(items)
        return items
