"""Resampling primitives shared by the tokenizer, data pipeline, and decoder.

All functions take channels-last float arrays shaped (..., h, w, c) and
preserve dtype.

bilinear_half_pixel uses a half-pixel grid with edge clamp; the quantizer
relies on it to upsample per-scale lookups back to full resolution.  For
power-of-two integer ratios its weights are small dyadic rationals, so
accumulating the scale pyramid in float64 is exact arithmetic whenever
the inputs live on a coarse binary lattice; the reconstruction identity
test leans on that.

Bicubic is Catmull-Rom (a = -0.5), half-pixel, separable, edge-clamped,
with no antialias prefilter: the degradation pipeline blurs before it
decimates, which is what keeps plain decimation defensible.
"""

from __future__ import annotations

import numpy as np


def _axis_take(x: np.ndarray, idx: np.ndarray, axis_from_end: int) -> np.ndarray:
    return np.take(x, idx, axis=x.ndim - axis_from_end)


def _bilinear_1d(x: np.ndarray, out_n: int, axis_from_end: int) -> np.ndarray:
    """Linear resample along one spatial axis (counted from the end)."""
    n = x.shape[x.ndim - axis_from_end]
    if out_n == n:
        return x
    src = (np.arange(out_n) + 0.5) * (n / out_n) - 0.5
    i0 = np.clip(np.floor(src).astype(np.int64), 0, n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    w = src - np.floor(src)
    # clamp below zero: floor(src) = -1 there, but both taps are row 0
    w = np.where(src < 0, 0.0, w)
    shape = [1] * x.ndim
    shape[x.ndim - axis_from_end] = out_n
    w = w.reshape(shape).astype(x.dtype)
    lo = _axis_take(x, i0, axis_from_end)
    hi = _axis_take(x, i1, axis_from_end)
    one = np.asarray(1.0, dtype=x.dtype)
    return (one - w) * lo + w * hi


def bilinear_half_pixel(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Half-pixel bilinear resize of (..., h, w, c) with edge clamp."""
    y = _bilinear_1d(x, out_hw[0], 3)
    return _bilinear_1d(y, out_hw[1], 2)


def area_downsample(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Box-filter downsample of (..., h, w, c).

    Integer ratios reduce to exact block means; fractional ratios use
    separable overlap weights.
    """
    h, w = x.shape[-3], x.shape[-2]
    oh, ow = out_hw
    if oh == h and ow == w:
        return x
    if h % oh == 0 and w % ow == 0:
        rh, rw = h // oh, w // ow
        lead = x.shape[:-3]
        c = x.shape[-1]
        blocks = x.reshape(*lead, oh, rh, ow, rw, c)
        return blocks.mean(axis=(-2, -4))
    y = _box_1d(x, oh, 3)
    return _box_1d(y, ow, 2)


def _box_1d(x: np.ndarray, out_n: int, axis_from_end: int) -> np.ndarray:
    n = x.shape[x.ndim - axis_from_end]
    if out_n == n:
        return x
    axis = x.ndim - axis_from_end
    moved = np.moveaxis(x, axis, 0)
    out_shape = (out_n,) + moved.shape[1:]
    out = np.zeros(out_shape, dtype=x.dtype)
    step = n / out_n
    for i in range(out_n):
        lo, hi = i * step, (i + 1) * step
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        total = np.asarray(0.0, dtype=x.dtype)
        acc = np.zeros(moved.shape[1:], dtype=x.dtype)
        for j in range(j0, min(j1, n)):
            cover = min(hi, j + 1) - max(lo, j)
            if cover <= 0:
                continue
            acc += np.asarray(cover, dtype=x.dtype) * moved[j]
            total = total + np.asarray(cover, dtype=x.dtype)
        out[i] = acc / total
    return np.moveaxis(out, 0, axis)


def _catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    """4-tap kernel weights for fractional offsets t, stacked on axis 1."""
    t2 = t * t
    t3 = t2 * t
    w0 = 0.5 * (-t + 2.0 * t2 - t3)
    w1 = 0.5 * (2.0 - 5.0 * t2 + 3.0 * t3)
    w2 = 0.5 * (t + 4.0 * t2 - 3.0 * t3)
    w3 = 0.5 * (-t2 + t3)
    return np.stack([w0, w1, w2, w3], axis=1)


def _bicubic_1d(x: np.ndarray, out_n: int, axis_from_end: int) -> np.ndarray:
    n = x.shape[x.ndim - axis_from_end]
    if out_n == n:
        return x
    src = (np.arange(out_n) + 0.5) * (n / out_n) - 0.5
    base = np.floor(src).astype(np.int64)
    t = src - base
    weights = _catmull_rom_weights(t).astype(x.dtype)
    out = None
    for tap in range(4):
        idx = np.clip(base + tap - 1, 0, n - 1)
        shape = [1] * x.ndim
        shape[x.ndim - axis_from_end] = out_n
        w = weights[:, tap].reshape(shape)
        term = w * _axis_take(x, idx, axis_from_end)
        out = term if out is None else out + term
    return out


def bicubic_resize(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Catmull-Rom bicubic resize of (..., h, w, c), half-pixel, edge clamp."""
    y = _bicubic_1d(x, out_hw[0], 3)
    return _bicubic_1d(y, out_hw[1], 2)


def gaussian_blur(x: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of (..., h, w, c) with reflect padding."""
    if sigma <= 0:
        return x
    radius = max(1, int(np.ceil(3.0 * sigma)))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel = (kernel / kernel.sum()).astype(x.dtype)
    y = _conv_reflect_1d(x, kernel, 3)
    return _conv_reflect_1d(y, kernel, 2)


def _conv_reflect_1d(x: np.ndarray, kernel: np.ndarray, axis_from_end: int) -> np.ndarray:
    axis = x.ndim - axis_from_end
    radius = (len(kernel) - 1) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (radius, radius)
    xp = np.pad(x, pad, mode="reflect")
    out = np.zeros_like(x)
    sl = [slice(None)] * x.ndim
    for k, wk in enumerate(kernel):
        sl[axis] = slice(k, k + x.shape[axis])
        out += wk * xp[tuple(sl)]
    return out


def center_crop(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Central crop of (..., h, w, c)."""
    h, w = x.shape[-3], x.shape[-2]
    oh, ow = out_hw
    if oh > h or ow > w:
        raise ValueError(f"crop {out_hw} larger than input {(h, w)}")
    top = (h - oh) // 2
    left = (w - ow) // 2
    return x[..., top : top + oh, left : left + ow, :]
