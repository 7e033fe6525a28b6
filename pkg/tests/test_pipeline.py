"""Run configuration, checkpoint integrity, stage training, and accounting."""

import csv
import dataclasses
import struct

import numpy as np
import pytest

from scalesr.arm import build_block_mask
from scalesr.data import build_corpus
from scalesr.numerics import Rng
from scalesr.pipeline import (CheckpointError, ConfigError, RunConfig, assemble_targets,
                              bench, evaluate, load_bundle, load_checkpoint, make_arm,
                              make_refiner, save_checkpoint, stage_finetune,
                              stage_pretrain, stage_tokenizer, super_resolve)

# A geometry small enough that all three stages run in seconds: 16px targets,
# factor-4 LR inputs, a three-scale pyramid ending on the 4x4 latent grid.
TINY = dict(
    seed=3, hr_size=16, sr_factor=4, schedule=(1, 2, 4), latent_dim=4, vocab=16,
    vae_width=8, width=16, depth=1, heads=2, n_classes=4, refiner_width=16,
    refiner_depth=1, t_train=20, refine_steps=3, batch_size=2,
    tokenizer_steps=4, tokenizer_finetune_steps=2, pretrain_steps=4,
    finetune_steps=4, cfg_scale=1.0)


@pytest.fixture(scope="module")
def cfg():
    return RunConfig(**TINY)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return build_corpus(str(root), 6, 16, seed=5, val_count=2)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus, cfg):
    """All three stages, run once and shared across this module."""
    train, _ = corpus
    out = tmp_path_factory.mktemp("run")
    tok_ck = str(out / "tokenizer.ck")
    pre_ck = str(out / "pretrain.ck")
    fin_ck = str(out / "finetune.ck")
    stage_tokenizer(cfg, train, tok_ck, quiet=True)
    stage_pretrain(cfg, train, tok_ck, pre_ck, quiet=True)
    stage_finetune(cfg, train, pre_ck, fin_ck, quiet=True)
    return tok_ck, pre_ck, fin_ck


def _assert_same_arrays(a: dict, b: dict):
    assert sorted(a) == sorted(b)
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].shape == b[k].shape, k
        assert a[k].tobytes() == b[k].tobytes(), k


# -- configuration ------------------------------------------------------------------


def test_config_round_trip():
    cfg = RunConfig(seed=9, schedule=(1, 2), width=32)
    d = cfg.to_dict()
    assert d["schedule"] == [1, 2]  # JSON-safe
    back = RunConfig.from_dict(d)
    assert back == cfg and isinstance(back.schedule, tuple)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="learning_rate"):
        RunConfig.from_dict({"learning_rate": 0.1, "bogus": 2})


def test_config_from_json_file(tmp_path):
    p = tmp_path / "run.json"
    p.write_text('{"seed": 7, "schedule": [1, 2, 4]}', encoding="utf-8")
    cfg = RunConfig.from_json_file(str(p))
    assert cfg.seed == 7 and cfg.schedule == (1, 2, 4)
    p.write_text('{"seed": 7,', encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        RunConfig.from_json_file(str(p))
    p.write_text("[1, 2]", encoding="utf-8")
    with pytest.raises(ConfigError, match="JSON object"):
        RunConfig.from_json_file(str(p))


# -- checkpoint format ---------------------------------------------------------------


def _sample_arrays() -> dict[str, np.ndarray]:
    rng = np.random.default_rng(2)
    return {
        "w": rng.standard_normal((5, 3)).astype(np.float32),
        "ema": rng.standard_normal(7),  # float64
        "steps": np.arange(4, dtype=np.int64),
        "t": np.array(9.5, dtype=np.float32),  # zero-dimensional
    }


def test_checkpoint_round_trip_bit_exact(tmp_path):
    p = str(tmp_path / "ck.bin")
    meta = {"config": {"seed": 0}, "stage": "t", "step": 3}
    arrays = _sample_arrays()
    save_checkpoint(p, meta, arrays)
    meta2, back = load_checkpoint(p)
    assert meta2 == meta
    _assert_same_arrays(arrays, back)


def test_checkpoint_detects_every_flipped_byte(tmp_path):
    p = str(tmp_path / "ck.bin")
    save_checkpoint(p, {"stage": "t", "step": 1}, _sample_arrays())
    data = bytearray(open(p, "rb").read())
    for pos in range(len(data)):
        orig = data[pos]
        data[pos] = orig ^ 0xFF
        open(p, "wb").write(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
        data[pos] = orig


def test_checkpoint_detects_every_truncation(tmp_path):
    p = str(tmp_path / "ck.bin")
    save_checkpoint(p, {"stage": "t", "step": 1}, _sample_arrays())
    data = open(p, "rb").read()
    for cut in range(len(data)):
        open(p, "wb").write(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "notes.txt"
    p.write_bytes(b"just some text, long enough to read a header from")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(p))


def test_checkpoint_rejects_future_version(tmp_path):
    p = str(tmp_path / "ck.bin")
    save_checkpoint(p, {"stage": "t", "step": 1}, _sample_arrays())
    data = bytearray(open(p, "rb").read())
    data[4:6] = struct.pack("<H", 99)
    open(p, "wb").write(data)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(str(p))


# -- corpus assembly -----------------------------------------------------------------


def test_assemble_targets_only_touches_negatives():
    rng0 = np.random.default_rng(3)
    hr = rng0.random((3, 8, 8, 3)).astype(np.float32)
    quality = np.array([1, 0, 1], dtype=np.int64)
    out = assemble_targets(hr, quality, Rng(0).stream("x"))
    assert out[0].tobytes() == hr[0].tobytes()
    assert out[2].tobytes() == hr[2].tobytes()
    assert out[1].tobytes() != hr[1].tobytes()


# -- stages --------------------------------------------------------------------------


def test_stage_outputs_load_as_bundles(trained, cfg):
    tok_ck, pre_ck, fin_ck = trained
    b0 = load_bundle(tok_ck)
    assert b0.arm is None and b0.refiner is None
    b1 = load_bundle(pre_ck)
    assert b1.arm is not None and b1.refiner is None
    b2 = load_bundle(fin_ck)
    assert b2.arm is not None and b2.refiner is not None
    assert b2.cfg == cfg


def test_tokenizer_resume_is_bit_exact(tmp_path, corpus, cfg, trained):
    train, _ = corpus
    part = dataclasses.replace(cfg, tokenizer_steps=2, tokenizer_finetune_steps=0)
    mid = str(tmp_path / "mid.ck")
    stage_tokenizer(part, train, mid, quiet=True)
    end = str(tmp_path / "end.ck")
    stage_tokenizer(cfg, train, end, resume=mid, quiet=True)
    _assert_same_arrays(load_checkpoint(trained[0])[1], load_checkpoint(end)[1])


def test_pretrain_resume_is_bit_exact(tmp_path, corpus, cfg, trained):
    train, _ = corpus
    part = dataclasses.replace(cfg, pretrain_steps=2)
    mid = str(tmp_path / "mid.ck")
    stage_pretrain(part, train, trained[0], mid, quiet=True)
    end = str(tmp_path / "end.ck")
    stage_pretrain(cfg, train, trained[0], end, resume=mid, quiet=True)
    _assert_same_arrays(load_checkpoint(trained[1])[1], load_checkpoint(end)[1])


def test_finetune_resume_is_bit_exact(tmp_path, corpus, cfg, trained):
    train, _ = corpus
    part = dataclasses.replace(cfg, finetune_steps=2)
    mid = str(tmp_path / "mid.ck")
    stage_finetune(part, train, trained[1], mid, quiet=True)
    end = str(tmp_path / "end.ck")
    stage_finetune(cfg, train, trained[1], end, resume=mid, quiet=True)
    _assert_same_arrays(load_checkpoint(trained[2])[1], load_checkpoint(end)[1])


def test_stages_reject_mismatched_resume(tmp_path, corpus, cfg, trained):
    train, _ = corpus
    out = str(tmp_path / "x.ck")
    with pytest.raises(CheckpointError, match="tokenizer"):
        stage_tokenizer(cfg, train, out, resume=trained[1], quiet=True)
    with pytest.raises(CheckpointError, match="pretrain"):
        stage_pretrain(cfg, train, trained[0], out, resume=trained[0], quiet=True)
    with pytest.raises(CheckpointError, match="pretrain"):
        stage_finetune(cfg, train, trained[0], out, quiet=True)


def test_pretrain_leaves_condition_encoder_at_init(cfg, trained):
    """Class-mode training never routes gradients through the LR condition
    path, so those arrays must arrive at the finetune warm start exactly as
    initialized while the shared trunk has clearly moved."""
    _, arrays = load_checkpoint(trained[1])
    init = make_arm(cfg).arrays()
    for name, arr in init.items():
        if name.startswith("cond.") or name.startswith("start_proj."):
            assert arrays[f"arm.{name}"].tobytes() == arr.tobytes(), name
    assert arrays["arm.head.w"].tobytes() != init["head.w"].tobytes()


def test_finetune_moves_condition_encoder(cfg, trained):
    init = make_arm(cfg).arrays()
    _, arrays = load_checkpoint(trained[2])
    moved = [n for n in init if n.startswith("cond.") and n.endswith(".w")
             and arrays[f"arm.{n}"].tobytes() != init[n].tobytes()]
    assert moved  # the LR prefix now carries gradient


def test_refiner_weight_zero_freezes_refiner(tmp_path, corpus, cfg, trained):
    train, _ = corpus
    alt = dataclasses.replace(cfg, refiner_weight=0.0, finetune_steps=2)
    out = str(tmp_path / "noref.ck")
    stage_finetune(alt, train, trained[1], out, quiet=True)
    _, arrays = load_checkpoint(out)
    for name, arr in make_refiner(alt).arrays().items():
        assert arrays[f"refiner.{name}"].tobytes() == arr.tobytes(), name
    assert not any(k.startswith(("opt.m.refiner.", "opt.v.refiner.")) for k in arrays)
    assert any(k.startswith("opt.m.arm.") for k in arrays)


# -- inference -----------------------------------------------------------------------


def test_super_resolve_shapes_and_determinism(trained):
    bundle = load_bundle(trained[2])
    lr = np.random.default_rng(0).random((2, 4, 4, 3)).astype(np.float32)
    sr1 = super_resolve(bundle, lr, seed=11)
    sr2 = super_resolve(bundle, lr, seed=11)
    sr3 = super_resolve(bundle, lr, seed=12)
    assert sr1.shape == (2, 16, 16, 3) and sr1.dtype == np.float32
    assert np.isfinite(sr1).all()
    assert sr1.tobytes() == sr2.tobytes()
    assert sr1.tobytes() != sr3.tobytes()


def test_super_resolve_variants_run(trained):
    bundle = load_bundle(trained[2])
    lr = np.random.default_rng(1).random((1, 4, 4, 3)).astype(np.float32)
    for kwargs in ({"cfg_scale": 0.0}, {"greedy": True}, {"refine_steps": 1}):
        out = super_resolve(bundle, lr, seed=4, **kwargs)
        assert out.shape == (1, 16, 16, 3) and np.isfinite(out).all()


def test_super_resolve_requires_generator(trained):
    bundle = load_bundle(trained[0])
    with pytest.raises(CheckpointError, match="generator"):
        super_resolve(bundle, np.zeros((1, 4, 4, 3), np.float32), seed=0)


def test_evaluate_writes_deterministic_csv(tmp_path, corpus, trained):
    _, val = corpus
    bundle = load_bundle(trained[2])
    c1, c2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    res = evaluate(bundle, val, c1, seed=7, quiet=True)
    evaluate(bundle, val, c2, seed=7, quiet=True)
    assert open(c1, "rb").read() == open(c2, "rb").read()
    with open(c1, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 2 + 2  # header, two val images, mean, delta
    assert rows[-2][0] == "mean" and rows[-1][0] == "delta_vs_bicubic"
    agg = res["aggregate"]
    assert agg["psnr_delta"] == pytest.approx(agg["psnr"] - agg["psnr_bicubic"])
    assert len(res["records"]) == 2


# -- accounting ----------------------------------------------------------------------


def test_bench_counts_default_geometry():
    info = bench(RunConfig())
    desk = info["desk"]["condition_mode"]
    assert desk["tokens_per_scale"] == [1, 4, 16, 64, 256]
    assert desk["tokens_total"] == 341
    assert desk["prefix_len"] == 256
    assert desk["sequence_len"] == 597
    assert desk["attention_pairs"] == 245925
    assert info["desk"]["class_mode"]["sequence_len"] == 341
    gen = info["desk"]["generation"]
    assert gen["scale_passes"] == 5 and gen["scale_passes_guided"] == 10
    assert gen["refine_evals_guided"] == 2 * gen["refine_steps"]


def test_bench_counts_publication_geometry():
    cfg = RunConfig()
    info = bench(cfg)
    paper = info["paper_scale"]["condition_mode"]
    assert paper["tokens_total"] == 2240
    assert paper["prefix_len"] == 1024
    assert paper["sequence_len"] == 3264
    mask = build_block_mask(cfg.paper_schedule, 1024)
    assert int(mask.sum()) == paper["attention_pairs"]
