"""Counter-based random streams on the splitmix64 finalizer.

Every stream is identified by (seed, gamma) and a draw counter.  Outputs are
mix64(seed + i * gamma) for i = 1, 2, ..., so any draw is a pure function of
the stream identity and its position: no hidden global state, identical
results on every platform, and blocks of any size can be generated with
vectorized uint64 arithmetic.

Streams are split by name (`stream("dropout")`) or by index (`at_step(t)`),
which makes training loops resumable without serializing generator state:
step t always re-derives the same substream.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_FNV_BASIS = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_INV_2_53 = 1.0 / (1 << 53)


def mix64(x: int) -> int:
    """splitmix64 finalizer on a python int, result in [0, 2^64)."""
    z = x & _MASK
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK
    return z ^ (z >> 31)


def fnv1a64(name: str) -> int:
    """FNV-1a 64-bit hash of a UTF-8 string."""
    h = _FNV_BASIS
    for byte in name.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # z: uint64 array; unsigned ops wrap, matching mix64 exactly.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_A)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_B)
    return z ^ (z >> np.uint64(31))


class Rng:
    """One named random stream; children are derived, never shared."""

    __slots__ = ("seed", "gamma", "counter")

    def __init__(self, seed: int):
        self.seed = mix64((seed & _MASK) ^ _GOLDEN)
        self.gamma = _GOLDEN
        self.counter = 0

    @classmethod
    def _raw(cls, seed: int, gamma: int) -> "Rng":
        rng = cls.__new__(cls)
        rng.seed = seed & _MASK
        rng.gamma = (gamma & _MASK) | 1
        rng.counter = 0
        return rng

    def stream(self, name: str) -> "Rng":
        """Independent child stream keyed by a string label."""
        h = fnv1a64(name)
        seed = mix64(self.seed ^ h)
        gamma = mix64((self.seed + h) ^ _MIX_B) | 1
        return Rng._raw(seed, gamma)

    def at_step(self, t: int) -> "Rng":
        """Independent child stream keyed by an integer, e.g. a step index."""
        base = (self.seed + ((t + 1) * self.gamma)) & _MASK
        seed = mix64(base ^ _MIX_A)
        gamma = mix64(base ^ _GOLDEN) | 1
        return Rng._raw(seed, gamma)

    # -- raw block generation ------------------------------------------------

    def _next_block(self, n: int) -> np.ndarray:
        start = self.counter + 1
        self.counter += n
        idx = np.arange(start, start + n, dtype=np.uint64)
        z = np.uint64(self.seed) + idx * np.uint64(self.gamma)
        return _mix64_array(z)

    # -- typed draws ----------------------------------------------------------

    def uniform(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Uniform in [0, 1)."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        bits = self._next_block(n) >> np.uint64(11)
        out = bits.astype(np.float64) * _INV_2_53
        return out.reshape(shape).astype(dtype, copy=False)

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        """Standard normal via Box-Muller."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        m = (n + 1) // 2
        bits = self._next_block(2 * m)
        # u1 in (0, 1] keeps the log finite; u2 in [0, 1).
        u1 = ((bits[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (bits[m:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape).astype(dtype, copy=False)

    def truncated_normal(self, shape=(), std=1.0, dtype=np.float64) -> np.ndarray:
        """Normal(0, std) with |z| > 2*std resampled, not clipped."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        out = self.normal((n,))
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self.normal((int(bad.sum()),))
            bad = np.abs(out) > 2.0
        return (out * std).reshape(shape).astype(dtype, copy=False)

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        """Uniform integers in [lo, hi)."""
        if hi <= lo:
            raise ValueError("integers() needs hi > lo")
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        span = np.uint64(hi - lo)
        vals = self._next_block(n) % span
        return (vals.astype(np.int64) + lo).reshape(shape)

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        """Boolean array, True with probability p."""
        return self.uniform(shape) < p

    def permutation(self, n: int) -> np.ndarray:
        """Random permutation of range(n) via stable argsort of random keys."""
        keys = self._next_block(n)
        return np.argsort(keys, kind="stable")

    def choice(self, n: int, size: int) -> np.ndarray:
        """size distinct indices from range(n)."""
        if size > n:
            raise ValueError("choice() without replacement needs size <= n")
        return self.permutation(n)[:size]


def _as_shape(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
