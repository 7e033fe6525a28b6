"""AdamW with decoupled weight decay over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    """Standard Adam moments plus decay applied directly to the weights.

    Only parameters whose .grad is set participate in a step; everything
    else (moments and weights) is left untouched, so freezing a submodule
    is just not backpropagating into it.  A step with any non-finite
    gradient is rejected as a whole and counted, never applied partially.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.t = 0
        self.rejected = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self) -> bool:
        """Apply one update; returns False if rejected for non-finite grads."""
        live = [(name, p) for name, p in self.params.items() if p.grad is not None]
        for _, p in live:
            if not np.isfinite(p.grad).all():
                self.rejected += 1
                return False
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in live:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update
        return True

    # -- checkpoint support ----------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"t": np.asarray([self.t, self.rejected], dtype=np.int64)}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        meta = arrays["t"]
        self.t = int(meta[0])
        self.rejected = int(meta[1])
        for name in self.params:
            self.m[name] = np.array(arrays[f"m.{name}"])
            self.v[name] = np.array(arrays[f"v.{name}"])
