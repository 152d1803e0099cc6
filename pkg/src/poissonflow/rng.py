"""Seeded, splittable random streams.

Every sampling routine in this package takes an explicit :class:`RngState`.
The same ``(seed, stream_id)`` pair always reproduces the same draws, and
distinct stream ids give statistically independent streams, so batches can
be generated in parallel without coordination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    # Standard splitmix64 finalizer; used to derive child stream ids.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngState:
    """A reproducible random stream identified by (seed, stream_id)."""

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.seed <= _MASK64):
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not (0 <= self.stream_id <= _MASK64):
            raise ValueError(f"stream_id must be an unsigned 64-bit integer, got {self.stream_id}")

    def generator(self) -> np.random.Generator:
        """Fresh PCG64 generator; the stream id is hashed into the seed material."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, index: int) -> "RngState":
        """Derive an independent substream, e.g. one per worker or per batch."""
        return RngState(self.seed, _splitmix64((self.stream_id << 1) ^ (index + 1)))
