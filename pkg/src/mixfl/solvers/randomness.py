"""Seeded random streams shared by every solver.

Each stream is derived from the run seed through ``SeedSequence`` spawn keys,
so the master coin, per-device sample streams, the participation stream and
the per-device LSVRG coins never overlap.  Streams are generated in fixed
blocks; element ``k`` of any stream is a pure function of ``(seed, k)``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "COIN",
    "SAMPLES",
    "PARTICIPATION",
    "LSVRG",
    "SUBSETS",
    "stream_rng",
    "CoinStream",
    "IndexStream",
    "coin_stream",
    "coin_bits",
]

COIN, SAMPLES, PARTICIPATION, LSVRG, SUBSETS = range(5)
BLOCK = 4096


def stream_rng(seed: int, tag: int, device: int | None = None) -> np.random.Generator:
    key = (tag,) if device is None else (tag, device)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def _check_p(p):
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")


class CoinStream:
    """Bernoulli(p) bits, 1 meaning aggregation."""

    def __init__(self, seed: int, p: float):
        _check_p(p)
        self.p = float(p)
        self._rng = stream_rng(seed, COIN)
        self._buf = np.empty(0, dtype=np.int8)
        self._pos = 0

    def _refill(self):
        fresh = (self._rng.random(BLOCK) < self.p).astype(np.int8)
        self._buf = np.concatenate([self._buf[self._pos:], fresh])
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        while len(self._buf) - self._pos < k:
            self._refill()
        out = self._buf[self._pos:self._pos + k].copy()
        self._pos += k
        return out

    def next(self) -> int:
        return int(self.take(1)[0])


class IndexStream:
    """Uniform indices in ``range(m)`` for one device."""

    def __init__(self, seed: int, device: int, m: int):
        if m < 1:
            raise ValueError("m must be positive")
        self.m = int(m)
        self._rng = stream_rng(seed, SAMPLES, device)
        self._buf = np.empty(0, dtype=np.int64)
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        while len(self._buf) - self._pos < k:
            fresh = self._rng.integers(0, self.m, size=BLOCK)
            self._buf = np.concatenate([self._buf[self._pos:], fresh])
            self._pos = 0
        out = self._buf[self._pos:self._pos + k].copy()
        self._pos += k
        return out

    def next(self) -> int:
        return int(self.take(1)[0])


def coin_stream(seed: int, p: float):
    """Infinite generator of coin bits."""
    cs = CoinStream(seed, p)
    while True:
        for b in cs.take(BLOCK):
            yield int(b)


def coin_bits(seed: int, p: float, k: int) -> np.ndarray:
    return CoinStream(seed, p).take(k)
