"""Image-space guidance: ramped extrapolation between branches plus sampling.

Combining positive- and negative-condition predictions as
``pos + lam * (pos - neg)`` in logit space sharpens the implied
likelihood-ratio term: softmax of the combination is proportional to
``p_pos^(1+lam) / p_neg^lam``, the usual guidance posterior tilt.  The
strength ramps linearly across scales so early coarse scales stay close to
the unguided distribution and fine scales get the full push.

The same combiner serves the refiner's noise predictions (arrays in, arrays
out); nothing here depends on the transformer.
"""

from __future__ import annotations

import numpy as np

from .numerics import Rng


def lambda_ramp(k: int, n_scales: int, lam_max: float) -> float:
    """Guidance strength at scale k (1-based): lam_max * k / K."""
    if n_scales <= 0:
        raise ValueError("n_scales must be positive")
    return lam_max * k / n_scales

def combine(pos: np.ndarray, neg: np.ndarray, lam: float) -> np.ndarray:
    """pos + lam * (pos - neg); lam 0 returns pos itself (bit-identical)."""
    if lam == 0.0:
        return pos
    return pos + lam * (pos - neg)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis in float64."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_tokens(logits: np.ndarray, rng: Rng, *, greedy: bool = False,
                  temperature: float = 1.0) -> np.ndarray:
    """Draw token indices from (..., vocab) logits.

    Greedy takes the argmax (first index on ties).  Otherwise sample from
    softmax(logits / temperature) by inverse CDF with one uniform per row,
    deterministic given the rng.
    """
    if greedy:
        return np.argmax(logits, axis=-1).astype(np.int64)
    if temperature <= 0:
        raise ValueError("temperature must be positive for sampling")
    probs = softmax(logits / temperature)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.uniform(logits.shape[:-1] + (1,), dtype=np.float64)
    idx = (u > cdf).sum(axis=-1)
    return np.minimum(idx, logits.shape[-1] - 1).astype(np.int64)