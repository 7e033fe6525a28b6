"""Multi-scale residual vector quantizer around a small convolutional VAE.

The encoder maps an HR image to an h x w x d latent; the quantizer then
walks the scale schedule coarse to fine, at each scale area-pooling the
running residual, assigning nearest codewords, upsampling the lookup back
to h x w (half-pixel bilinear) and subtracting it.  The token pyramid plus
the final continuous residual z reconstruct the latent exactly by
construction; the decoder mirrors the encoder with nearest-neighbour
upsampling.

Codewords train by EMA over assigned pooled residuals (all scales pooled
together), with Laplace smoothing and dead-code reseeding.  Half of the
training batches bypass quantization entirely so the autoencoder keeps a
clean reconstruction path; a later finetune phase freezes the autoencoder
and drops random non-final scales so the codebook learns to cover partial
pyramids.
"""

from __future__ import annotations

import numpy as np

from .numerics import Rng, Tensor, ops
from .numerics.tensor import no_grad
from .resample import area_downsample, bilinear_half_pixel

# -- codebook ------------------------------------------------------------------


class Codebook:
    """|V| x d codewords plus EMA accumulators and usage tracking."""

    def __init__(self, size: int, dim: int, rng: Rng):
        self.vectors = rng.normal((size, dim), dtype=np.float32) * 0.5
        self.ema_counts = np.ones(size, dtype=np.float64)
        self.ema_sums = self.vectors.astype(np.float64).copy()
        self.last_used = np.zeros(size, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "vectors": self.vectors,
            "ema_counts": self.ema_counts,
            "ema_sums": self.ema_sums,
            "last_used": self.last_used,
        }

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        self.vectors = np.array(arrays["vectors"], dtype=np.float32)
        self.ema_counts = np.array(arrays["ema_counts"], dtype=np.float64)
        self.ema_sums = np.array(arrays["ema_sums"], dtype=np.float64)
        self.last_used = np.array(arrays["last_used"], dtype=np.int64)


def nearest_indices(vectors: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Index of the L2-nearest codeword per row of x (..., d).

    Distances are accumulated in float64 as explicit squared differences;
    ties break to the lowest index via argmin's first-hit rule.
    """
    flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
    codes = vectors.astype(np.float64)
    d2 = ((flat[:, None, :] - codes[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1).reshape(x.shape[:-1])


def _pyramid_walk(latent: np.ndarray, vectors: np.ndarray, schedule: tuple[int, ...],
                  keep: np.ndarray | None = None):
    """Coarse-to-fine assignment walk over the kept scales.

    Returns (indices, z, recon, pooled_list, idx_list); dropped scales get
    None in indices and contribute nothing anywhere.
    """
    h, w = latent.shape[-3], latent.shape[-2]
    codes = vectors.astype(latent.dtype)
    residual = latent.copy()
    recon = np.zeros_like(latent)
    indices, pooled_list, idx_list = [], [], []
    for k, s in enumerate(schedule):
        if keep is not None and not keep[k]:
            indices.append(None)
            continue
        pooled = area_downsample(residual, (s, s))
        idx = nearest_indices(vectors, pooled)
        up = bilinear_half_pixel(codes[idx], (h, w))
        residual -= up
        recon += up
        indices.append(idx)
        pooled_list.append(pooled.reshape(-1, latent.shape[-1]))
        idx_list.append(idx.reshape(-1))
    return indices, residual, recon, pooled_list, idx_list


def quantize_pyramid(latent: np.ndarray, vectors: np.ndarray, schedule: tuple[int, ...]):
    """Assign the scale pyramid for latent (..., h, w, d).

    Returns (indices, z, recon): per-scale index maps (..., s, s), the
    continuous residual, and the summed upsampled lookups, in the latent's
    dtype.  recon + z reproduces the latent up to (and on a coarse binary
    lattice in float64, exactly equal to) floating-point arithmetic.
    """
    indices, z, recon, _, _ = _pyramid_walk(latent, vectors, schedule)
    return indices, z, recon


def reconstruct_from_indices(indices, vectors: np.ndarray, schedule: tuple[int, ...],
                             out_hw: tuple[int, int], dtype=np.float32) -> np.ndarray:
    """Sum of upsampled lookups, accumulated in schedule order."""
    codes = vectors.astype(dtype)
    recon = None
    for idx in indices:
        up = bilinear_half_pixel(codes[idx], out_hw)
        recon = up if recon is None else recon + up
    return recon


def scale_dropout(schedule: tuple[int, ...], p_drop: float, rng: Rng) -> np.ndarray:
    """Keep mask over scales; non-final scales drop i.i.d., the final never."""
    keep = np.ones(len(schedule), dtype=bool)
    if len(schedule) > 1 and p_drop > 0:
        keep[:-1] = ~rng.bernoulli(p_drop, (len(schedule) - 1,))
    return keep


def quantize_pyramid_dropped(latent: np.ndarray, vectors: np.ndarray,
                             schedule: tuple[int, ...], keep: np.ndarray):
    """quantize_pyramid over the kept scales only; dropped scales contribute
    nothing to the reconstruction (their slot is skipped, not re-assigned)."""
    indices, z, recon, _, _ = _pyramid_walk(latent, vectors, schedule, keep)
    return indices, z, recon


def ema_update(codebook: Codebook, assigned: np.ndarray, idx: np.ndarray,
               decay: float = 0.99, eps: float = 1e-5, step: int = 0):
    """One EMA codebook update from pooled residual vectors and their codes."""
    flat = assigned.reshape(-1, codebook.dim).astype(np.float64)
    flat_idx = idx.reshape(-1)
    counts = np.bincount(flat_idx, minlength=codebook.size).astype(np.float64)
    sums = np.zeros((codebook.size, codebook.dim), dtype=np.float64)
    np.add.at(sums, flat_idx, flat)
    codebook.ema_counts = decay * codebook.ema_counts + (1.0 - decay) * counts
    codebook.ema_sums = decay * codebook.ema_sums + (1.0 - decay) * sums
    total = codebook.ema_counts.sum()
    smoothed = (codebook.ema_counts + eps) / (total + codebook.size * eps) * total
    codebook.vectors = (codebook.ema_sums / smoothed[:, None]).astype(np.float32)
    codebook.last_used[counts > 0] = step


def reseed_dead_codes(codebook: Codebook, pool: np.ndarray, step: int,
                      patience: int, rng: Rng) -> list[int]:
    """Replace codes unused for `patience` steps with random pool vectors."""
    dead = np.flatnonzero(step - codebook.last_used > patience)
    if dead.size == 0:
        return []
    flat = pool.reshape(-1, codebook.dim)
    picks = rng.integers(0, flat.shape[0], (dead.size,))
    for code, pick in zip(dead, picks):
        vec = flat[pick].astype(np.float64)
        codebook.vectors[code] = vec.astype(np.float32)
        codebook.ema_sums[code] = vec
        codebook.ema_counts[code] = 1.0
        codebook.last_used[code] = step
    return dead.tolist()


# -- autoencoder ------------------------------------------------------------------


def _conv_param(rng: Rng, cout: int, cin: int, k: int) -> Tensor:
    fan_in = cin * k * k
    std = (2.0 / fan_in) ** 0.5
    return Tensor(rng.normal((cout, cin, k, k), dtype=np.float32) * std, requires_grad=True)


class Vae:
    """Factor-4 conv autoencoder: (B,3,S,S) <-> (B,d,S/4,S/4)."""

    def __init__(self, latent_dim: int, width: int, rng: Rng):
        self.latent_dim = latent_dim
        self.width = width
        w2 = width * 2
        r = rng.stream("vae")
        self.params: dict[str, Tensor] = {}
        spec = [
            ("enc0", width, 3), ("enc1", w2, width), ("enc2", w2, w2),
            ("enc3", w2, w2), ("enc4", w2, w2), ("enc5", latent_dim, w2),
            ("dec0", w2, latent_dim), ("dec1", w2, w2), ("dec2", w2, w2),
            ("dec3", width, w2), ("dec4", 3, width),
        ]
        for name, cout, cin in spec:
            self.params[f"{name}.w"] = _conv_param(r.stream(name), cout, cin, 3)
            self.params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def _conv(self, x, name: str, stride: int = 1):
        return ops.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride, pad=1)

    def encode(self, images) -> Tensor:
        """images: (B, 3, S, S) in [0,1] -> latent (B, d, S/4, S/4)."""
        h = ops.silu(self._conv(images, "enc0"))
        h = ops.silu(self._conv(h, "enc1", stride=2))
        h = ops.silu(self._conv(h, "enc2"))
        h = ops.silu(self._conv(h, "enc3", stride=2))
        h = ops.silu(self._conv(h, "enc4"))
        return self._conv(h, "enc5")

    def decode(self, latent) -> Tensor:
        """latent: (B, d, S/4, S/4) -> images (B, 3, S, S), unclamped."""
        h = ops.silu(self._conv(latent, "dec0"))
        h = ops.upsample_nearest(h, 2)
        h = ops.silu(self._conv(h, "dec1"))
        h = ops.silu(self._conv(h, "dec2"))
        h = ops.upsample_nearest(h, 2)
        h = ops.silu(self._conv(h, "dec3"))
        return self._conv(h, "dec4")

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=np.float32)


# -- bundled tokenizer ----------------------------------------------------------


class Tokenizer:
    """VAE + codebook + schedule: images to token pyramids and back."""

    def __init__(self, schedule: tuple[int, ...], codebook_size: int, latent_dim: int,
                 vae_width: int, seed: int):
        self.schedule = tuple(schedule)
        root = Rng(seed).stream("tokenizer")
        self.vae = Vae(latent_dim, vae_width, root.stream("init"))
        self.codebook = Codebook(codebook_size, latent_dim, root.stream("codebook"))

    @property
    def final_hw(self) -> tuple[int, int]:
        s = self.schedule[-1]
        return (s, s)

    def encode_latent(self, images: np.ndarray) -> np.ndarray:
        """(B, S, S, 3) in [0,1] -> (B, h, w, d) numpy latent, no graph."""
        with no_grad():
            x = Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))
            z = self.vae.encode(x)
        return np.ascontiguousarray(z.data.transpose(0, 2, 3, 1))

    def decode_latent(self, latent: np.ndarray) -> np.ndarray:
        """(B, h, w, d) latent -> (B, S, S, 3) images clipped to [0,1]."""
        with no_grad():
            x = Tensor(np.ascontiguousarray(latent.transpose(0, 3, 1, 2), dtype=np.float32))
            img = self.vae.decode(x)
        return np.clip(np.ascontiguousarray(img.data.transpose(0, 2, 3, 1)), 0.0, 1.0)

    def tokenize(self, images: np.ndarray):
        """(B, S, S, 3) -> (indices per scale, continuous residual z)."""
        latent = self.encode_latent(images)
        indices, z, _ = quantize_pyramid(latent, self.codebook.vectors, self.schedule)
        return indices, z

    def parameters(self) -> dict[str, Tensor]:
        return self.vae.parameters()

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"vae.{k}": v for k, v in self.vae.arrays().items()}
        out.update({f"codebook.{k}": v for k, v in self.codebook.arrays().items()})
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        self.vae.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("vae.")})
        self.codebook.load_arrays({k[9:]: v for k, v in arrays.items() if k.startswith("codebook.")})


def train_step(tokenizer: Tokenizer, images: np.ndarray, step: int, rng: Rng,
               *, bypass_prob: float = 0.5, dropout_p: float = 0.0,
               freeze_autoencoder: bool = False, commit_weight: float = 0.25,
               ema_decay: float = 0.99, ema_eps: float = 1e-5,
               dead_patience: int = 200) -> dict:
    """One tokenizer training step; returns metrics and leaves grads set.

    The caller owns the optimizer.  Bypass batches train the plain
    autoencoder path; quantized batches add a commitment term and update
    the codebook EMA (plus dead-code reseeding).  With
    freeze_autoencoder=True only the codebook changes, which is the
    dropout-finetune phase.
    """
    step_rng = rng.at_step(step)
    bypass = (not freeze_autoencoder) and bool(step_rng.stream("bypass").uniform(()) < bypass_prob)
    x = Tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))
    metrics: dict = {"step": step, "bypass": bypass, "reseeded": []}

    if freeze_autoencoder:
        with no_grad():
            latent_t = tokenizer.vae.encode(x)
        latent = np.ascontiguousarray(latent_t.data.transpose(0, 2, 3, 1))
        keep = scale_dropout(tokenizer.schedule, dropout_p, step_rng.stream("dropout"))
        indices, z, recon, pooled_list, idx_list = _pyramid_walk(
            latent, tokenizer.codebook.vectors, tokenizer.schedule, keep)
        ema_update(tokenizer.codebook, np.concatenate(pooled_list), np.concatenate(idx_list),
                   ema_decay, ema_eps, step)
        metrics["reseeded"] = reseed_dead_codes(tokenizer.codebook, latent, step,
                                                dead_patience, step_rng.stream("reseed"))
        with no_grad():
            out = tokenizer.vae.decode(Tensor(np.ascontiguousarray(
                recon.transpose(0, 3, 1, 2).astype(np.float32))))
            mse = float(np.mean((out.data - x.data) ** 2))
        metrics.update(loss=mse, recon_mse=mse, kept=keep.tolist())
        return metrics

    latent_t = tokenizer.vae.encode(x)
    if bypass:
        out = tokenizer.vae.decode(latent_t)
        loss = ops.mean(ops.square(ops.sub(out, x)))
        loss.backward()
        metrics.update(loss=loss.item(), recon_mse=loss.item())
        return metrics

    latent = np.ascontiguousarray(latent_t.data.transpose(0, 2, 3, 1))
    indices, z, recon, pooled_list, idx_list = _pyramid_walk(
        latent, tokenizer.codebook.vectors, tokenizer.schedule)
    ema_update(tokenizer.codebook, np.concatenate(pooled_list), np.concatenate(idx_list),
               ema_decay, ema_eps, step)
    metrics["reseeded"] = reseed_dead_codes(tokenizer.codebook, latent, step,
                                            dead_patience, step_rng.stream("reseed"))
    # straight-through: decoder sees the quantized latent, encoder gets its grad
    recon_nchw = np.ascontiguousarray(recon.transpose(0, 3, 1, 2).astype(np.float32))
    ste = ops.add(latent_t, Tensor(recon_nchw - latent_t.data))
    out = tokenizer.vae.decode(ste)
    recon_loss = ops.mean(ops.square(ops.sub(out, x)))
    commit = ops.mean(ops.square(ops.sub(latent_t, Tensor(recon_nchw))))
    loss = ops.add(recon_loss, ops.mul(commit, commit_weight))
    loss.backward()
    metrics.update(loss=loss.item(), recon_mse=recon_loss.item(), commit=commit.item(),
                   z_norm=float(np.sqrt(np.mean(z**2))))
    return metrics


