"""Per-site diffusion refiner for final-scale quantization residuals.

The token pyramid reconstructs the latent only up to a quantization
residual at the finest scale.  This module models that residual z with a
small noise-prediction MLP conditioned on the transformer's final-scale
hidden states: each residual site gets its own conditioning row, so the
network is an MLP applied per site with adaptive layer-norm modulation
(shift/scale/gate regressed from condition + timestep, zero-initialized).

Noise schedule: squared-cosine signal level
    abar(t) = cos^2(((t/T + s) / (1 + s)) * pi/2) / f(0),  s = 0.008
with per-step betas 1 - abar(t)/abar(t-1) clipped to 0.999 and the stored
cumulative product recomputed from the clipped betas.  Training draws a
uniform step and regresses the added noise; sampling walks an evenly
spaced subsequence of steps ancestrally with the fixed small posterior
variance.
"""

from __future__ import annotations

import numpy as np

from .guidance import combine
from .numerics import Rng, Tensor, ops
from .numerics.tensor import no_grad


class NoiseSchedule:
    """Discrete squared-cosine schedule; index t-1 holds step t of 1..T."""

    def __init__(self, t_train: int = 100, s: float = 0.008, max_beta: float = 0.999):
        self.t_train = t_train
        self.s = s
        t = np.arange(t_train + 1, dtype=np.float64)
        f = np.cos(((t / t_train + s) / (1.0 + s)) * np.pi / 2.0) ** 2
        abar_cont = f / f[0]
        betas = 1.0 - abar_cont[1:] / abar_cont[:-1]
        self.betas = np.minimum(betas, max_beta)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def diffuse(self, z0: np.ndarray, t: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """q(z_t | z_0) sample; t is an int array of 0-based step indices,
        one per leading axis of z0 (per row, or per row and site)."""
        t = np.asarray(t)
        ab = self.alpha_bar[t].reshape(t.shape + (1,) * (z0.ndim - t.ndim))
        return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise

    def sampling_steps(self, n_steps: int) -> np.ndarray:
        """Evenly spaced 0-based step indices, ascending, always ending at T-1."""
        if not 1 <= n_steps <= self.t_train:
            raise ValueError("n_steps must be in [1, t_train]")
        steps = np.round(np.linspace(self.t_train - 1, 0, n_steps)).astype(np.int64)
        return np.unique(steps)


def timestep_embedding(t: np.ndarray, width: int) -> np.ndarray:
    """Sinusoidal features of integer timesteps, t.shape + (width,) float32."""
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    return emb.astype(np.float32)


class Refiner:
    """Noise-prediction MLP over (B, n_sites, dim) residuals."""

    def __init__(self, dim: int, cond_width: int, width: int = 128, depth: int = 3,
                 hidden_ratio: int = 2, seed: int = 0, t_train: int = 100):
        self.dim = dim
        self.cond_width = cond_width
        self.width = width
        self.depth = depth
        self.schedule = NoiseSchedule(t_train)
        rng = Rng(seed).stream("refiner")

        def lin(r: Rng, n_in: int, n_out: int) -> Tensor:
            # He-style fan-in gain: the epsilon target needs O(1/sqrt(1-abar))
            # output gain at small t, which tiny transformer-style inits
            # take far too long to grow into
            std = (2.0 / n_in) ** 0.5
            return Tensor(r.truncated_normal((n_in, n_out), std=std, dtype=np.float32),
                          requires_grad=True)

        def lin_small(r: Rng, n_in: int, n_out: int) -> Tensor:
            return Tensor(r.truncated_normal((n_in, n_out), std=0.02, dtype=np.float32),
                          requires_grad=True)

        p: dict[str, Tensor] = {}
        p["in.w"] = lin(rng.stream("in"), dim, width)
        p["in.b"] = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
        p["cond.w"] = lin(rng.stream("cond"), cond_width, width)
        p["cond.b"] = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
        p["time.w1"] = lin_small(rng.stream("t1"), width, width)
        p["time.b1"] = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
        p["time.w2"] = lin_small(rng.stream("t2"), width, width)
        p["time.b2"] = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
        hidden = hidden_ratio * width
        for i in range(depth):
            br = rng.stream(f"block{i}")
            p[f"block{i}.mod.w"] = Tensor(np.zeros((width, 3 * width), dtype=np.float32),
                                          requires_grad=True)
            p[f"block{i}.mod.b"] = Tensor(np.zeros(3 * width, dtype=np.float32),
                                          requires_grad=True)
            p[f"block{i}.fc1.w"] = lin(br.stream("fc1"), width, hidden)
            p[f"block{i}.fc1.b"] = Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True)
            p[f"block{i}.fc2.w"] = lin(br.stream("fc2"), hidden, width)
            p[f"block{i}.fc2.b"] = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
        p["out.w"] = Tensor(np.zeros((width, dim), dtype=np.float32), requires_grad=True)
        p["out.b"] = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.params = p

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k, v in self.params.items():
            v.data = np.array(arrays[k], dtype=np.float32)

    def forward(self, z_t, t: np.ndarray, cond) -> Tensor:
        """Predict the noise in z_t (B, n, dim) given per-site cond (B, n, C).

        t is (B,) for one shared step per row or (B, n) per site.
        """
        p = self.params
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=np.float32))
        cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=np.float32))
        b = z_t.shape[0]
        t_emb = Tensor(timestep_embedding(t, self.width))
        t_vec = ops.linear(t_emb, p["time.w1"], p["time.b1"])
        t_vec = ops.linear(ops.silu(t_vec), p["time.w2"], p["time.b2"])
        if np.ndim(t) == 1:
            t_vec = ops.reshape(t_vec, (b, 1, self.width))
        c = ops.add(ops.linear(cond, p["cond.w"], p["cond.b"]), t_vec)
        c = ops.silu(c)
        h = ops.linear(z_t, p["in.w"], p["in.b"])
        w = self.width
        for i in range(self.depth):
            m = ops.linear(c, p[f"block{i}.mod.w"], p[f"block{i}.mod.b"])
            shift = ops.getitem(m, (Ellipsis, slice(0, w)))
            scale = ops.getitem(m, (Ellipsis, slice(w, 2 * w)))
            gate = ops.getitem(m, (Ellipsis, slice(2 * w, 3 * w)))
            u = ops.layer_norm(h)
            u = ops.add(ops.mul(u, ops.add(scale, 1.0)), shift)
            u = ops.linear(u, p[f"block{i}.fc1.w"], p[f"block{i}.fc1.b"])
            u = ops.silu(u)
            u = ops.linear(u, p[f"block{i}.fc2.w"], p[f"block{i}.fc2.b"])
            h = ops.add(h, ops.mul(gate, u))
        return ops.linear(ops.layer_norm(h), p["out.w"], p["out.b"])


def noise_loss(eps_hat: Tensor, noise: np.ndarray) -> Tensor:
    """Mean squared error between predicted and injected noise."""
    return ops.mean(ops.square(ops.sub(eps_hat, noise)))


def refiner_loss(refiner: Refiner, z0: np.ndarray, cond, rng: Rng) -> Tensor:
    """One training term: uniform step per site, fresh noise, epsilon regression.

    Every residual site is its own diffusion sample, so each draws its own
    step; that covers the schedule much more densely per batch than one
    step per image.  cond may be a live Tensor (joint training: gradients
    continue into the transformer) or a plain array.
    """
    b, n = z0.shape[0], z0.shape[1]
    t = rng.stream("t").integers(0, refiner.schedule.t_train, (b, n))
    noise = rng.stream("noise").normal(z0.shape).astype(np.float32)
    z_t = refiner.schedule.diffuse(z0.astype(np.float64), t, noise).astype(np.float32)
    eps_hat = refiner.forward(z_t, t, cond)
    return noise_loss(eps_hat, noise)


def sample(refiner: Refiner, cond: np.ndarray, rng: Rng, *, n_steps: int = 10,
           cond_neg: np.ndarray | None = None, lam: float = 0.0,
           shape: tuple | None = None, clip: float = 4.0) -> np.ndarray:
    """Ancestral sampling over an evenly spaced step subsequence.

    Guidance extrapolates the two branches' noise predictions with the
    shared combiner; lam 0 never evaluates the negative branch.  The
    denoised estimate is clamped to [-clip, clip]: near t_train the signal
    level is ~1e-7, so unclamped estimates amplify prediction error by
    1/sqrt(alpha_bar) ~ 1e3 and can blow past the residual's actual range.
    Returns float32 (B, n, dim).
    """
    sched = refiner.schedule
    steps = sched.sampling_steps(n_steps)
    abar = sched.alpha_bar[steps]
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    betas = 1.0 - abar / abar_prev
    post_var = betas * (1.0 - abar_prev) / (1.0 - abar)

    b, n = cond.shape[0], cond.shape[1]
    out_shape = shape if shape is not None else (b, n, refiner.dim)
    z = rng.stream("init").normal(out_shape)
    with no_grad():
        for i in range(len(steps) - 1, -1, -1):
            t = np.full(b, steps[i], dtype=np.int64)
            eps = refiner.forward(z.astype(np.float32), t, cond).data.astype(np.float64)
            if lam != 0.0 and cond_neg is not None:
                eps_neg = refiner.forward(z.astype(np.float32), t, cond_neg).data.astype(np.float64)
                eps = combine(eps, eps_neg, lam)
            z0_hat = (z - np.sqrt(1.0 - abar[i]) * eps) / np.sqrt(abar[i])
            np.clip(z0_hat, -clip, clip, out=z0_hat)
            mean = (np.sqrt(abar_prev[i]) * betas[i] / (1.0 - abar[i])) * z0_hat \
                + (np.sqrt(1.0 - betas[i]) * (1.0 - abar_prev[i]) / (1.0 - abar[i])) * z
            if i > 0:
                noise = rng.stream("step").at_step(i).normal(out_shape)
                z = mean + np.sqrt(post_var[i]) * noise
            else:
                z = mean
    return z.astype(np.float32)