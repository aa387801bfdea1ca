"""Counter-based random streams with a fixed Box-Muller Gaussian layer."""

from __future__ import annotations

from typing import Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    """Seeded PCG64 stream.

    Uniforms come from the raw 64-bit outputs (top 53 bits), so the stream
    depends only on the PCG64 algorithm and not on numpy's distribution code.
    Gaussians are produced in pairs by Box-Muller; an odd request discards
    the spare so every call consumes a whole number of pairs.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed) & _MASK64
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._bits = np.random.PCG64(ss)

    def spawn(self, index: int) -> "Rng":
        """Independent child stream for chain/worker ``index``."""
        return Rng(self.seed, self.key + (int(index),))

    @property
    def state(self) -> dict:
        return self._bits.state

    def uniform(self, size=None) -> np.ndarray:
        n = int(np.prod(size)) if size is not None else 1
        raw = self._bits.random_raw(n)
        u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(size) if size is not None else u[0]

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Integers in ``[low, high)``."""
        u = self.uniform(size)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        if isinstance(shape, (int, np.integer)):
            shape = (int(shape),)
        shape = tuple(shape)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return z.reshape(shape).astype(dtype)


def draw_normal(rng: "Rng | Sequence[Rng]", shape, dtype=np.float32) -> np.ndarray:
    """Gaussian draw from one stream, or one stream per leading batch entry."""
    if isinstance(rng, Rng):
        return rng.normal(shape, dtype)
    if len(rng) != shape[0]:
        raise ValueError(f"{len(rng)} streams for batch of {shape[0]}")
    return np.stack([r.normal(shape[1:], dtype) for r in rng])
