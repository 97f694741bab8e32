"""Deterministic, platform-independent random number generation.

Everything stochastic in this package (synthetic data, weight init, shuffles)
draws from a counter-based SplitMix64 stream so that a fixed integer seed
yields bit-identical output on every platform, independent of numpy version.

Constants (Steele, Lea & Flood's SplitMix64 finalizer):

    GOLDEN = 0x9E3779B97F4A7C15
    mix(z) = h(z ^ (z >> 31))            with
    z     <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z     <- (z ^ (z >> 27)) * 0x94D049BB133111EB

The k-th raw draw of a stream with seed s is mix(s + (k+1) * GOLDEN), which
makes generation vectorizable and position-addressable.

Uniforms take the top 53 bits: u = (x >> 11) * 2^-53, so u is in [0, 1).

Gaussians use Box-Muller with a documented ordering: for n outputs, draw
2*ceil(n/2) raw words; word 2k feeds u1 = ((x >> 11) + 1) * 2^-53 in (0, 1]
and word 2k+1 feeds u2 = (x >> 11) * 2^-53 in [0, 1); then

    z[2k]   = sqrt(-2 ln u1) * cos(2 pi u2)
    z[2k+1] = sqrt(-2 ln u1) * sin(2 pi u2)

and the first n values are returned in order.
"""

from __future__ import annotations

import math

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO53 = float(1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based SplitMix64 stream with Box-Muller Gaussians."""

    def __init__(self, seed: int):
        self.seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = 0

    def spawn(self, tag: int) -> "Rng":
        """Derive an independent child stream; used to give each pipeline
        stage (data, init, shuffle, ...) its own counter space."""
        base = np.uint64((self.seed + np.uint64(tag & 0xFFFFFFFFFFFFFFFF) * GOLDEN))
        return Rng(int(_mix(np.asarray(base))))

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix(self.seed + idx * GOLDEN)

    def uniform(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) / _TWO53
        return u.reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        raw = self.u64(2 * m)
        u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) / _TWO53
        u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) / _TWO53
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m, dtype=np.float64)
        z[0::2] = r * np.cos(2.0 * math.pi * u2)
        z[1::2] = r * np.sin(2.0 * math.pi * u2)
        return (mean + std * z[:n]).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n): stable argsort of n raw
        64-bit keys (a collision among n < 2^32 keys is vanishingly rare and
        still deterministic)."""
        return np.argsort(self.u64(n), kind="stable")

    def integers(self, lo: int, hi: int, n: int) -> np.ndarray:
        """n integers in [lo, hi) by modulo reduction (bias < (hi-lo)/2^64)."""
        span = np.uint64(hi - lo)
        return (lo + (self.u64(n) % span).astype(np.int64)).astype(np.int64)
