"""Scale-aligned rotary position embedding.

Tokens from every scale of the pyramid are placed on one shared grid: a
token at (i, j) in an h_k x w_k map gets effective position
(i * H / h_k, j * W / w_k) where H x W is the final-scale geometry.  The
first half of each head's channels is rotated by the effective row, the
second half by the effective column, with the usual geometric frequency
ladder inside each half.  Coarse-scale tokens therefore share angles with
the fine-scale sites they cover, and condition tokens (laid out on the
final-scale grid) align exactly with final-scale tokens.

Positions are zero-based, so the single scale-1 token sits at the origin
and is rotated by the identity.
"""

from __future__ import annotations

import numpy as np

from .numerics.tensor import Tensor, accum, as_tensor, make


def effective_positions(schedule: tuple[int, ...], final_hw: tuple[int, int],
                        prefix_hw: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-token effective (row, col) for [optional prefix] + all scales.

    Returns two float64 arrays of length L, raster order inside each map.
    """
    big_h, big_w = final_hw
    rows, cols = [], []
    grids = []
    if prefix_hw is not None:
        grids.append(prefix_hw)
    grids.extend((s, s) for s in schedule)
    for h_k, w_k in grids:
        i = np.repeat(np.arange(h_k, dtype=np.float64), w_k)
        j = np.tile(np.arange(w_k, dtype=np.float64), h_k)
        rows.append(i * (big_h / h_k))
        cols.append(j * (big_w / w_k))
    return np.concatenate(rows), np.concatenate(cols)


def angle_table(rows: np.ndarray, cols: np.ndarray, head_dim: int,
                base: float = 10000.0) -> np.ndarray:
    """Per-token rotation angles, shape (L, head_dim // 2).

    Pair p < head_dim//4 covers channels (2p, 2p+1) in the row half; the
    remaining pairs cover the column half.
    """
    if head_dim % 4 != 0:
        raise ValueError("head_dim must be divisible by 4 for two rotary halves")
    half = head_dim // 2  # channels per spatial axis
    n_pairs = half // 2
    m = np.arange(n_pairs, dtype=np.float64)
    freqs = base ** (-2.0 * m / half)
    return np.concatenate([rows[:, None] * freqs[None, :], cols[:, None] * freqs[None, :]], axis=1)


def rope_tables(schedule, final_hw, head_dim, prefix_hw=None, base: float = 10000.0,
                dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables, each (L, head_dim // 2)."""
    rows, cols = effective_positions(tuple(schedule), final_hw, prefix_hw)
    ang = angle_table(rows, cols, head_dim, base)
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs of x (..., L, head_dim) by the table angles.

    cos/sin are (L, head_dim // 2) constants; rotation is orthogonal, so
    the backward pass is the transposed (inverse) rotation.
    """
    x = as_tensor(x)
    even = x.data[..., 0::2]
    odd = x.data[..., 1::2]
    out_data = np.empty_like(x.data)
    out_data[..., 0::2] = even * cos - odd * sin
    out_data[..., 1::2] = even * sin + odd * cos

    def backward():
        g = out.grad
        ge = g[..., 0::2]
        go = g[..., 1::2]
        dx = np.empty_like(g)
        dx[..., 0::2] = ge * cos + go * sin
        dx[..., 1::2] = -ge * sin + go * cos
        accum(x, dx)

    out = make(out_data, (x,), backward, x.requires_grad)
    return out
