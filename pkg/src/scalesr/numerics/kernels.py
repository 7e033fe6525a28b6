"""Optional numba fast paths with numpy fallbacks.

Only kernels where numba measurably beats numpy on one core live here; the
numpy fallbacks compute the same quantity so the package works without a
compiler.  Keep fastmath off: reduction order must stay fixed.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAS_NUMBA = False


def _softmax_grad_np(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    t = p * dp
    return t - p * t.sum(axis=-1, keepdims=True)


def _softmax_rows_np(s: np.ndarray) -> None:
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)


if _HAS_NUMBA:

    @njit(cache=True)
    def _softmax_grad_rows(p, dp, out):
        rows, cols = p.shape
        for r in range(rows):
            acc = 0.0
            for c in range(cols):
                acc += p[r, c] * dp[r, c]
            for c in range(cols):
                out[r, c] = p[r, c] * (dp[r, c] - acc)

    def softmax_grad(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
        """d(softmax)/dlogits pullback: p * (dp - sum(p * dp))."""
        flat_p = np.ascontiguousarray(p.reshape(-1, p.shape[-1]))
        flat_dp = np.ascontiguousarray(dp.reshape(-1, dp.shape[-1]))
        out = np.empty_like(flat_p)
        _softmax_grad_rows(flat_p, flat_dp, out)
        return out.reshape(p.shape)

    @njit(cache=True)
    def _fnv1a64_u8(arr, h):
        prime = np.uint64(0x100000001B3)
        for i in range(arr.size):
            h = (h ^ np.uint64(arr[i])) * prime
        return h

    def fnv1a64_bytes(payload: bytes, seed: int = 0xCBF29CE484222325) -> int:
        """FNV-1a 64 over a byte string; pass a previous digest as seed to chain."""
        return int(_fnv1a64_u8(np.frombuffer(payload, dtype=np.uint8), np.uint64(seed)))

else:  # pragma: no cover

    def softmax_grad(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
        """d(softmax)/dlogits pullback: p * (dp - sum(p * dp))."""
        return _softmax_grad_np(p, dp)

    def fnv1a64_bytes(payload: bytes, seed: int = 0xCBF29CE484222325) -> int:
        """FNV-1a 64 over a byte string; pass a previous digest as seed to chain."""
        h = seed
        for b in payload:
            h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return h


# numpy's SIMD exp beats a compiled scalar loop here, so the forward softmax
# always takes the vectorized path
def softmax_rows(s: np.ndarray) -> None:
    """Shifted softmax over the last axis, in place."""
    _softmax_rows_np(s)
