"""Seeded random streams with splittable sub-streams.

Streams are backed by numpy's PCG64 seeded through ``SeedSequence``, so a
child stream is a pure function of (root seed, path of labels). Adding a new
consumer with its own path never shifts the draws of existing consumers.
Sampling routines that must stay frozen across library versions (subset
selection) are implemented directly on top of ``integers``.
"""

from __future__ import annotations

import zlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


class RngStream:
    """A deterministic random stream identified by a seed and a label path."""

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._path = _path
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=_path))
        )

    def child(self, *labels) -> "RngStream":
        """Derive an independent sub-stream keyed by the given labels."""
        return RngStream(self.seed, self._path + tuple(_label_key(l) for l in labels))

    def integers(self, low: int, high: int | None = None) -> int:
        return int(self._gen.integers(low, high))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size=size)

    def truncated_normal(self, std: float, size) -> np.ndarray:
        """Normal draws with tails clipped at two standard deviations."""
        return np.clip(self._gen.normal(0.0, std, size=size), -2.0 * std, 2.0 * std)

    def shuffled(self, items: list) -> list:
        """A shuffled copy (Fisher-Yates; does not depend on generator internals)."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.integers(0, i + 1)
            out[i], out[j] = out[j], out[i]
        return out


def sample_without_replacement(rng: RngStream, population, k: int) -> list[int]:
    """Draw exactly ``k`` distinct elements from ``population``.

    A partial Fisher-Yates over a copy of the population: the result is a
    pure function of (stream state, population order, k).
    """
    pool = list(population)
    n = len(pool)
    if not (0 <= k <= n):
        raise ValueError(f"cannot draw {k} items from a population of {n}")
    for i in range(k):
        j = rng.integers(i, n)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]
