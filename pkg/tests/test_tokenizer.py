"""Residual quantizer, EMA codebook, scale dropout, and the conv VAE."""

import numpy as np
import pytest

from scalesr.numerics import AdamW, Rng, Tensor, ops
from scalesr.tokenizer import (Codebook, Tokenizer, Vae, ema_update,
                               nearest_indices, quantize_pyramid, quantize_pyramid_dropped,
                               reconstruct_from_indices, reseed_dead_codes, scale_dropout,
                               train_step)

SCHEDULE = (1, 2, 4, 8, 16)


def lattice(rng: Rng, shape, step=2.0**-12, span=4096):
    """Values k * 2^-12 with |k| <= span: exact in float64 pyramid arithmetic."""
    return rng.integers(-span, span + 1, shape).astype(np.float64) * step


# -- nearest-codeword assignment -----------------------------------------------


def test_nearest_exact_codeword_maps_to_itself():
    rng = Rng(0).stream("codes")
    vectors = rng.normal((64, 16), dtype=np.float32)
    idx = nearest_indices(vectors, vectors[np.array([3, 41, 0, 63])])
    assert idx.tolist() == [3, 41, 0, 63]


def test_nearest_tie_breaks_to_lowest_index():
    vectors = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
    idx = nearest_indices(vectors, np.array([[1.0, 0.0], [0.9, 0.1]]))
    assert idx.tolist() == [0, 0]


def test_single_scale_quantize_matches_exhaustive_search():
    # Oracle: per-site python loop over every codeword with explicit norms.
    for trial in range(10):
        rng = Rng(100 + trial).stream("nn")
        vectors = rng.normal((48, 8), dtype=np.float32)
        latent = rng.normal((8, 8, 8))
        indices, _, _ = quantize_pyramid(latent, vectors, (8,))
        got = indices[0]
        for i in range(8):
            for j in range(8):
                d2 = [float(((vectors[v].astype(np.float64) - latent[i, j]) ** 2).sum())
                      for v in range(48)]
                assert got[i, j] == int(np.argmin(d2))


# -- pyramid reconstruction identity ---------------------------------------------


def test_pyramid_identity_bit_exact_on_lattice_float64():
    rng = Rng(7).stream("lattice")
    latent = lattice(rng.stream("latent"), (2, 16, 16, 16))
    vectors = lattice(rng.stream("codes"), (64, 16)).astype(np.float32)
    indices, z, recon = quantize_pyramid(latent, vectors, SCHEDULE)
    fhat = reconstruct_from_indices(indices, vectors, SCHEDULE, (16, 16), dtype=np.float64)
    assert np.array_equal(fhat + z, latent)
    assert np.array_equal(recon, fhat)


def test_pyramid_identity_continuous_float64_tight():
    rng = Rng(8).stream("cont")
    latent = rng.stream("latent").normal((2, 16, 16, 16))
    vectors = rng.stream("codes").normal((64, 16), dtype=np.float32)
    indices, z, recon = quantize_pyramid(latent, vectors, SCHEDULE)
    fhat = reconstruct_from_indices(indices, vectors, SCHEDULE, (16, 16), dtype=np.float64)
    assert np.max(np.abs(fhat + z - latent)) <= 1e-12


def test_pyramid_identity_float32_within_1e_5():
    rng = Rng(9).stream("f32")
    latent = rng.stream("latent").normal((2, 16, 16, 16), dtype=np.float32)
    vectors = rng.stream("codes").normal((64, 16), dtype=np.float32)
    indices, z, recon = quantize_pyramid(latent, vectors, SCHEDULE)
    assert z.dtype == np.float32
    fhat = reconstruct_from_indices(indices, vectors, SCHEDULE, (16, 16), dtype=np.float32)
    assert np.max(np.abs(fhat + z - latent)) <= 1e-5


def test_pyramid_shapes_and_counts():
    rng = Rng(1).stream("shapes")
    latent = rng.normal((3, 16, 16, 16), dtype=np.float32)
    vectors = rng.normal((64, 16), dtype=np.float32)
    indices, z, recon = quantize_pyramid(latent, vectors, SCHEDULE)
    assert [i.shape for i in indices] == [(3, s, s) for s in SCHEDULE]
    assert z.shape == latent.shape and recon.shape == latent.shape
    assert sum(i[0].size for i in indices) == 341


def test_each_scale_reduces_residual_energy_after_fit():
    # With a codebook containing the zero vector, adding scales never hurts:
    # each step subtracts the nearest codeword, zero included.
    rng = Rng(2).stream("energy")
    latent = rng.normal((1, 16, 16, 8))
    vectors = np.concatenate([np.zeros((1, 8)), rng.normal((63, 8))]).astype(np.float32)
    prev = float(np.mean(latent**2))
    for k in range(1, len(SCHEDULE) + 1):
        _, z, _ = quantize_pyramid(latent, vectors, SCHEDULE[:k])
        cur = float(np.mean(z**2))
        assert cur <= prev + 1e-9
        prev = cur


# -- scale dropout ----------------------------------------------------------------


def test_scale_dropout_never_drops_final():
    for seed in range(20):
        keep = scale_dropout(SCHEDULE, 0.9, Rng(seed).stream("d"))
        assert keep[-1]


def test_scale_dropout_probability_extremes():
    keep0 = scale_dropout(SCHEDULE, 0.0, Rng(0).stream("d"))
    assert keep0.all()
    keep1 = scale_dropout(SCHEDULE, 1.0, Rng(0).stream("d"))
    assert keep1.tolist() == [False, False, False, False, True]


def test_scale_dropout_golden_mask():
    keep = scale_dropout(SCHEDULE, 0.5, Rng(1234).stream("dropout"))
    assert keep.tolist() == [False, False, False, True, True]


def test_dropped_scales_skip_reconstruction():
    rng = Rng(5).stream("drop")
    latent = rng.normal((1, 8, 8, 4))
    vectors = rng.normal((32, 4), dtype=np.float32)
    keep = np.array([True, False, True, True])
    indices, z, recon = quantize_pyramid_dropped(latent, vectors, (1, 2, 4, 8), keep)
    assert indices[1] is None
    kept_recon = reconstruct_from_indices([i for i in indices if i is not None],
                                          vectors, (1, 4, 8), (8, 8), dtype=np.float64)
    assert np.max(np.abs(kept_recon + z - latent)) < 1e-12


# -- EMA codebook -----------------------------------------------------------------


def test_ema_decay_one_freezes_codebook():
    rng = Rng(6).stream("ema")
    cb = Codebook(16, 4, rng.stream("init"))
    before = cb.vectors.copy()
    x = rng.normal((100, 4))
    idx = rng.integers(0, 16, (100,))
    ema_update(cb, x, idx, decay=1.0, step=1)
    first = cb.vectors.copy()
    ema_update(cb, x, idx, decay=1.0, step=2)
    assert np.allclose(before, cb.vectors, atol=1e-5)
    assert np.array_equal(first, cb.vectors)


def test_ema_converges_to_assigned_mean():
    rng = Rng(7).stream("ema2")
    cb = Codebook(4, 2, rng.stream("init"))
    target = np.array([3.0, -1.0])
    x = np.tile(target, (50, 1)) + rng.normal((50, 2)) * 0.01
    idx = np.zeros(50, dtype=np.int64)
    for step in range(400):
        ema_update(cb, x, idx, decay=0.9, step=step)
    assert np.allclose(cb.vectors[0], target, atol=0.05)


def test_ema_smoothing_keeps_unassigned_codes_finite():
    rng = Rng(8).stream("ema3")
    cb = Codebook(8, 2, rng.stream("init"))
    x = rng.normal((20, 2))
    idx = np.zeros(20, dtype=np.int64)  # only code 0 ever assigned
    for step in range(200):
        ema_update(cb, x, idx, decay=0.5, step=step)
    assert np.isfinite(cb.vectors).all()


def test_dead_code_reseeding_after_patience():
    rng = Rng(9).stream("dead")
    cb = Codebook(4, 2, rng.stream("init"))
    cb.last_used[:] = 0
    pool = rng.normal((10, 2))
    reseeded = reseed_dead_codes(cb, pool, step=300, patience=200, rng=rng.stream("r"))
    assert reseeded == [0, 1, 2, 3]
    assert (cb.last_used == 300).all()
    rows = {tuple(np.round(v, 5)) for v in cb.vectors.astype(np.float64)}
    pool_rows = {tuple(np.round(v, 5)) for v in pool.astype(np.float32).astype(np.float64)}
    assert rows <= pool_rows
    assert not reseed_dead_codes(cb, pool, step=400, patience=200, rng=rng.stream("r2"))


# -- VAE and training step ---------------------------------------------------------


def test_vae_round_trip_shapes():
    vae = Vae(16, 8, Rng(0).stream("v"))
    x = Tensor(Rng(1).stream("x").uniform((2, 3, 32, 32), dtype=np.float32))
    z = vae.encode(x)
    assert z.shape == (2, 16, 8, 8)
    y = vae.decode(z)
    assert y.shape == (2, 3, 32, 32)


def test_tokenizer_tokenize_and_decode_shapes():
    tok = Tokenizer(SCHEDULE, 64, 16, 8, seed=0)
    images = Rng(2).stream("img").uniform((2, 64, 64, 3))
    indices, z = tok.tokenize(images)
    assert [i.shape for i in indices] == [(2, s, s) for s in SCHEDULE]
    assert z.shape == (2, 16, 16, 16)
    out = tok.decode_latent(z)
    assert out.shape == (2, 64, 64, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_train_step_bypass_flag_follows_stream():
    tok = Tokenizer((1, 2, 4), 16, 4, 4, seed=3)
    images = Rng(3).stream("img").uniform((2, 16, 16, 3))
    rng = Rng(3).stream("steps")
    seen = set()
    for step in range(12):
        for p in tok.parameters().values():
            p.grad = None
        m = train_step(tok, images, step, rng)
        seen.add(m["bypass"])
    assert seen == {True, False}


def test_train_step_quantized_path_sets_encoder_grads():
    tok = Tokenizer((1, 2, 4), 16, 4, 4, seed=4)
    images = Rng(4).stream("img").uniform((2, 16, 16, 3))
    rng = Rng(4).stream("steps")
    for step in range(12):
        for p in tok.parameters().values():
            p.grad = None
        m = train_step(tok, images, step, rng, bypass_prob=0.0)
        assert not m["bypass"]
        assert "commit" in m
        grads = [p.grad for p in tok.parameters().values()]
        assert all(g is not None for g in grads)
        assert any(np.abs(g).max() > 0 for g in grads)
        break


def test_freeze_phase_only_moves_codebook():
    tok = Tokenizer((1, 2, 4), 16, 4, 4, seed=5)
    images = Rng(5).stream("img").uniform((2, 16, 16, 3))
    vae_before = {k: v.data.copy() for k, v in tok.parameters().items()}
    cb_before = tok.codebook.vectors.copy()
    m = train_step(tok, images, 0, Rng(5).stream("steps"), dropout_p=0.5,
                   freeze_autoencoder=True)
    assert all(np.array_equal(vae_before[k], v.data) for k, v in tok.parameters().items())
    assert all(v.grad is None for v in tok.parameters().values())
    assert not np.array_equal(cb_before, tok.codebook.vectors)
    assert "kept" in m and m["kept"][-1]


def test_tokenizer_overfits_small_set():
    # smooth ramps: what a factor-4 bottleneck can actually represent
    tok = Tokenizer((1, 2, 4, 8), 32, 8, 8, seed=6)
    rng = Rng(6)
    g = rng.stream("img")
    xs = np.linspace(0, 1, 32)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    imgs = []
    for _ in range(8):
        coef = g.uniform((3, 3))
        img = np.stack([coef[c, 0] * gx + coef[c, 1] * gy + coef[c, 2] * 0.3
                        for c in range(3)], axis=-1)
        imgs.append(img / max(1.0, img.max()))
    images = np.stack(imgs).astype(np.float32)

    opt = AdamW(tok.parameters(), lr=3e-3)
    steps = rng.stream("steps")
    last = None
    for step in range(400):
        opt.zero_grad()
        last = train_step(tok, images, step, steps)
        opt.step()
    # quantized reconstruction through the full pyramid
    indices, z = tok.tokenize(images)
    recon = reconstruct_from_indices(indices, tok.codebook.vectors, (1, 2, 4, 8), (8, 8))
    out = tok.decode_latent(recon + z)
    mse = float(np.mean((out - images) ** 2))
    assert mse < 5e-3, f"overfit MSE {mse:.5f} (last loss {last['loss']:.5f})"
