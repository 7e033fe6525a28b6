"""Training stages, checkpoints, super-resolution driver, evaluation, accounting.

The run is three stages, each resumable from its own checkpoint file:

1. tokenizer: autoencoder + codebook on target images (a main phase with
   50% quantization bypass, then a frozen-autoencoder phase where only the
   codebook EMA adapts under random scale dropout);
2. pretrain: class-conditional next-scale transformer on token pyramids
   (no LR prefix; class start token; class+quality conditioning);
3. finetune: LR-conditioned super-resolution (prefix + pooled start, the
   quality flag as the only modulation input) jointly with the residual
   refiner.

Every random decision derives from (seed, purpose, step) through counter
streams, so resuming from a checkpoint replays the exact run and two runs
with the same flags are bit-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import struct

import numpy as np

from . import refiner as refiner_mod
from .arm import NEGATIVE, POSITIVE, Arm, attention_spans, build_block_mask
from .data import degrade, degrade_strong, psnr, read_image, read_manifest, ssim
from .numerics import AdamW, Rng, ops
from .numerics.kernels import fnv1a64_bytes
from .resample import bicubic_resize
from .tokenizer import Tokenizer, reconstruct_from_indices
from .tokenizer import train_step as tokenizer_train_step


class ConfigError(ValueError):
    """Unknown or malformed run-configuration key."""


class CheckpointError(IOError):
    """Corrupt, truncated, or mismatched checkpoint file."""


@dataclasses.dataclass
class RunConfig:
    """Flat hyperparameter record; serialized verbatim into checkpoints."""

    seed: int = 0
    # geometry
    hr_size: int = 64
    sr_factor: int = 4
    schedule: tuple = (1, 2, 4, 8, 16)
    latent_dim: int = 16
    vocab: int = 64
    # model sizes
    vae_width: int = 32
    width: int = 128
    depth: int = 4
    heads: int = 4
    n_classes: int = 4
    refiner_width: int = 128
    refiner_depth: int = 3
    t_train: int = 100
    refine_steps: int = 10
    # rotary frequency base, sized to the final-grid coordinate range
    rope_base: float = 100.0
    # optimization
    batch_size: int = 8
    tokenizer_steps: int = 700
    tokenizer_finetune_steps: int = 150
    scale_dropout_p: float = 0.1
    bypass_prob: float = 0.5
    commit_weight: float = 0.25
    pretrain_steps: int = 900
    finetune_steps: int = 700
    lr_tokenizer: float = 2e-3
    lr_arm: float = 1e-3
    lr_finetune: float = 5e-4
    weight_decay: float = 0.01
    refiner_weight: float = 2.0
    # generation
    cfg_scale: float = 1.5
    # reference geometry at publication scale, for accounting only
    paper_schedule: tuple = (1, 2, 3, 4, 6, 9, 13, 18, 24, 32)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"] = list(self.schedule)
        d["paper_schedule"] = list(self.paper_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(d)
        for key in ("schedule", "paper_schedule"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(d)


# -- checkpoint format -------------------------------------------------------------
#
# magic "SCSR" | u16 version | u32 meta_len | meta JSON (config, stage, step)
# | u64 fnv1a64(meta), then u32 n_sections and per section:
#   u16 name_len | name | u8 dtype_len | dtype str | u8 ndim | i64 dims...
#   u64 payload_len | payload | u64 checksum
# where the checksum is fnv1a64 chained over name, dtype, shape table, and
# payload, so a flipped bit anywhere in the section is caught.  Trailing
# marker "SEND".

_MAGIC = b"SCSR"
_VERSION = 1
_END = b"SEND"


def save_checkpoint(path: str, meta: dict, arrays: dict[str, np.ndarray]):
    """Write config metadata plus named arrays with per-section checksums."""
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", fnv1a64_bytes(blob)))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], order="C")  # ascontiguousarray would flatten 0-d
            if arr.dtype.byteorder == ">":  # payloads are little-endian on disk
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            nb = name.encode("utf-8")
            dt = arr.dtype.str.encode("ascii")
            shape_bytes = struct.pack(f"<B{arr.ndim}q", arr.ndim, *arr.shape)
            payload = arr.tobytes()
            digest = fnv1a64_bytes(nb)
            digest = fnv1a64_bytes(dt, digest)
            digest = fnv1a64_bytes(shape_bytes, digest)
            digest = fnv1a64_bytes(payload, digest)
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", len(dt)))
            fh.write(dt)
            fh.write(shape_bytes)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
            fh.write(struct.pack("<Q", digest))
        fh.write(_END)
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; every section checksum is verified."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, meta_len = struct.unpack("<HI", _read_exact(fh, 6, "header"))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        blob = _read_exact(fh, meta_len, "metadata")
        (meta_sum,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata checksum"))
        if fnv1a64_bytes(blob) != meta_sum:
            raise CheckpointError(f"{path}: metadata checksum mismatch")
        try:
            meta = json.loads(blob.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt metadata") from exc
        (n_sections,) = struct.unpack("<I", _read_exact(fh, 4, "section count"))
        arrays: dict[str, np.ndarray] = {}
        for i in range(n_sections):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, f"section {i} name"))
            nb = _read_exact(fh, name_len, f"section {i} name")
            try:
                name = nb.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CheckpointError(f"{path}: corrupt section {i} name") from exc
            (dt_len,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} dtype"))
            dt = _read_exact(fh, dt_len, f"{name} dtype")
            try:
                dtype = np.dtype(dt.decode("ascii"))
            except (TypeError, ValueError, UnicodeDecodeError) as exc:
                raise CheckpointError(f"{path}: corrupt dtype in section '{name}'") from exc
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} ndim"))
            dims = _read_exact(fh, 8 * ndim, f"{name} shape")
            shape = struct.unpack(f"<{ndim}q", dims)
            (payload_len,) = struct.unpack("<Q", _read_exact(fh, 8, f"{name} length"))
            count = 1
            for dim in shape:
                count *= dim
            if any(dim < 0 for dim in shape) or count * dtype.itemsize != payload_len:
                raise CheckpointError(
                    f"{path}: shape table disagrees with payload in section '{name}'")
            payload = _read_exact(fh, payload_len, f"{name} payload")
            (checksum,) = struct.unpack("<Q", _read_exact(fh, 8, f"{name} checksum"))
            digest = fnv1a64_bytes(nb)
            digest = fnv1a64_bytes(dt, digest)
            digest = fnv1a64_bytes(struct.pack("<B", ndim) + dims, digest)
            digest = fnv1a64_bytes(payload, digest)
            if digest != checksum:
                raise CheckpointError(f"{path}: checksum mismatch in section '{name}'")
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        if _read_exact(fh, 4, "end marker") != _END:
            raise CheckpointError(f"{path}: missing end marker")
    return meta, arrays


def _split(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    plen = len(prefix)
    return {k[plen:]: v for k, v in arrays.items() if k.startswith(prefix)}


# -- model construction ----------------------------------------------------------------


def make_tokenizer(cfg: RunConfig) -> Tokenizer:
    return Tokenizer(cfg.schedule, cfg.vocab, cfg.latent_dim, cfg.vae_width, cfg.seed)


def make_arm(cfg: RunConfig) -> Arm:
    return Arm(cfg.schedule, cfg.vocab, cfg.latent_dim, cfg.width, cfg.depth,
               cfg.heads, cfg.n_classes, cfg.seed, sr_factor=cfg.sr_factor,
               rope_base=cfg.rope_base)


def make_refiner(cfg: RunConfig) -> refiner_mod.Refiner:
    return refiner_mod.Refiner(cfg.latent_dim, cfg.width, cfg.refiner_width,
                               cfg.refiner_depth, seed=cfg.seed, t_train=cfg.t_train)


class Bundle:
    """Tokenizer + transformer + refiner restored from one checkpoint."""

    def __init__(self, cfg: RunConfig, tokenizer: Tokenizer, arm: Arm | None,
                 refiner: refiner_mod.Refiner | None):
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.arm = arm
        self.refiner = refiner


def load_bundle(path: str) -> Bundle:
    meta, arrays = load_checkpoint(path)
    cfg = RunConfig.from_dict(meta["config"])
    tok = make_tokenizer(cfg)
    tok.load_arrays(_split(arrays, "tokenizer."))
    arm = None
    if any(k.startswith("arm.") for k in arrays):
        arm = make_arm(cfg)
        arm.load_arrays(_split(arrays, "arm."))
    ref = None
    if any(k.startswith("refiner.") for k in arrays):
        ref = make_refiner(cfg)
        ref.load_arrays(_split(arrays, "refiner."))
    return Bundle(cfg, tok, arm, ref)


# -- corpus access -----------------------------------------------------------------


def load_corpus(manifest_path: str):
    """Manifest rows -> (images (N,S,S,3) float32, class ids, quality labels)."""
    rows = read_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    imgs = np.stack([read_image(os.path.join(root, rel)) for rel, _, _ in rows])
    classes = np.array([c for _, c, _ in rows], dtype=np.int64)
    quality = np.array([q for _, _, q in rows], dtype=np.int64)
    return imgs.astype(np.float32), classes, quality


def assemble_targets(hr: np.ndarray, quality: np.ndarray, rng: Rng) -> np.ndarray:
    """Training targets: the HR image for positives, a collapsed version
    for negatives (so the negative flag marks genuinely bad targets)."""
    out = hr.copy()
    for i in np.nonzero(quality == NEGATIVE)[0]:
        out[i] = degrade_strong(hr[i].astype(np.float64), rng.stream(f"neg{i}")).astype(np.float32)
    return out


def assemble_lr(targets: np.ndarray, rng: Rng, factor: int) -> np.ndarray:
    """Per-image stochastic degradation to LR inputs."""
    out = []
    for i in range(targets.shape[0]):
        out.append(degrade(targets[i].astype(np.float64), rng.stream(f"lr{i}"),
                           factor=factor).astype(np.float32))
    return np.stack(out)


# -- training stages ----------------------------------------------------------------


def _log(msg: str, quiet: bool):
    if not quiet:
        print(msg, flush=True)


def _lr_at(base: float, step: int, total: int, warmup: int = 0,
           floor_frac: float = 0.05) -> float:
    """Linear warmup then half-cosine decay to base*floor_frac.

    A pure function of the step counter, so resumed runs recompute the
    identical schedule and stay bit-exact.
    """
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    t = min(max((step - warmup) / span, 0.0), 1.0)
    return base * (floor_frac + (1.0 - floor_frac) * 0.5 * (1.0 + np.cos(np.pi * t)))


def stage_tokenizer(cfg: RunConfig, train_manifest: str, out_path: str,
                    resume: str | None = None, quiet: bool = False) -> dict:
    """Main phase (autoencoder + codebook), then frozen-autoencoder phase."""
    imgs, classes, quality = load_corpus(train_manifest)
    tok = make_tokenizer(cfg)
    opt = AdamW(tok.parameters(), lr=cfg.lr_tokenizer)
    step0 = 0
    if resume is not None:
        meta, arrays = load_checkpoint(resume)
        if meta.get("stage") != "tokenizer":
            raise CheckpointError(f"{resume}: expected a tokenizer checkpoint")
        tok.load_arrays(_split(arrays, "tokenizer."))
        opt.load_state_arrays(_split(arrays, "opt."))
        step0 = int(meta["step"])
    total = cfg.tokenizer_steps + cfg.tokenizer_finetune_steps
    seed_root = Rng(cfg.seed)
    rng_batch = seed_root.stream("tok.batch")
    rng_step = seed_root.stream("tok.step")
    rng_deg = seed_root.stream("tok.degrade")
    n = imgs.shape[0]
    metrics: dict = {}
    for step in range(step0, total):
        finetune = step >= cfg.tokenizer_steps
        sel = rng_batch.at_step(step).integers(0, n, (cfg.batch_size,))
        batch = assemble_targets(imgs[sel], quality[sel], rng_deg.at_step(step))
        opt.zero_grad()
        metrics = tokenizer_train_step(
            tok, batch, step, rng_step,
            bypass_prob=0.0 if finetune else cfg.bypass_prob,
            dropout_p=cfg.scale_dropout_p if finetune else 0.0,
            freeze_autoencoder=finetune,
            commit_weight=cfg.commit_weight)
        if not finetune:
            opt.lr = _lr_at(cfg.lr_tokenizer, step, cfg.tokenizer_steps)
            opt.step()
        if step % 50 == 0 or step == total - 1:
            phase = "codebook" if finetune else "main"
            _log(f"tokenizer[{phase}] step {step}/{total} loss {metrics['loss']:.5f}", quiet)
    arrays = {f"tokenizer.{k}": v for k, v in tok.arrays().items()}
    arrays.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    save_checkpoint(out_path, {"config": cfg.to_dict(), "stage": "tokenizer",
                               "step": total}, arrays)
    return metrics


def stage_pretrain(cfg: RunConfig, train_manifest: str, tokenizer_ckpt: str,
                   out_path: str, resume: str | None = None, quiet: bool = False) -> dict:
    """Class-conditional next-scale pretraining on token pyramids."""
    imgs, classes, quality = load_corpus(train_manifest)
    meta, tok_arrays = load_checkpoint(tokenizer_ckpt)
    tok = make_tokenizer(cfg)
    tok.load_arrays(_split(tok_arrays, "tokenizer."))
    arm = make_arm(cfg)
    opt = AdamW(arm.parameters(), lr=cfg.lr_arm, weight_decay=cfg.weight_decay)
    step0 = 0
    if resume is not None:
        rmeta, rarr = load_checkpoint(resume)
        if rmeta.get("stage") != "pretrain":
            raise CheckpointError(f"{resume}: expected a pretrain checkpoint")
        arm.load_arrays(_split(rarr, "arm."))
        opt.load_state_arrays(_split(rarr, "opt."))
        step0 = int(rmeta["step"])
    seed_root = Rng(cfg.seed)
    rng_batch = seed_root.stream("pre.batch")
    rng_deg = seed_root.stream("pre.degrade")
    n = imgs.shape[0]
    vectors = tok.codebook.vectors
    metrics: dict = {}
    for step in range(step0, cfg.pretrain_steps):
        sel = rng_batch.at_step(step).integers(0, n, (cfg.batch_size,))
        batch = assemble_targets(imgs[sel], quality[sel], rng_deg.at_step(step))
        indices, _ = tok.tokenize(batch)
        teacher = arm.teacher_inputs(indices, vectors)
        opt.zero_grad()
        logits, _ = arm.forward_train(teacher, class_ids=classes[sel],
                                      quality_labels=quality[sel])
        loss = arm.token_loss(logits, indices)
        loss.backward()
        opt.lr = _lr_at(cfg.lr_arm, step, cfg.pretrain_steps, warmup=30)
        opt.step()
        metrics = {"step": step, "loss": float(loss.data)}
        if step % 50 == 0 or step == cfg.pretrain_steps - 1:
            _log(f"pretrain step {step}/{cfg.pretrain_steps} ce {metrics['loss']:.4f}", quiet)
    arrays = {f"tokenizer.{k}": v for k, v in tok.arrays().items()}
    arrays.update({f"arm.{k}": v for k, v in arm.arrays().items()})
    arrays.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    save_checkpoint(out_path, {"config": cfg.to_dict(), "stage": "pretrain",
                               "step": cfg.pretrain_steps}, arrays)
    return metrics


def stage_finetune(cfg: RunConfig, train_manifest: str, pretrain_ckpt: str,
                   out_path: str, resume: str | None = None, quiet: bool = False) -> dict:
    """LR-conditioned finetuning jointly with the residual refiner.

    Warm start: every transformer parameter is taken from the pretrain
    checkpoint.  The condition encoder and pooled-start projection exist
    there but were never touched by class-mode gradients, so they arrive
    at their initialization, which is exactly the fresh-start semantic.
    With refiner_weight 0 the refiner contributes no loss and its
    parameters are left out of the optimizer entirely.
    """
    imgs, classes, quality = load_corpus(train_manifest)
    meta, parrays = load_checkpoint(pretrain_ckpt)
    if meta.get("stage") not in ("pretrain", "finetune"):
        raise CheckpointError(f"{pretrain_ckpt}: expected a pretrain checkpoint")
    tok = make_tokenizer(cfg)
    tok.load_arrays(_split(parrays, "tokenizer."))
    arm = make_arm(cfg)
    arm.load_arrays(_split(parrays, "arm."))
    refiner = make_refiner(cfg)
    joint = cfg.refiner_weight > 0
    params = {f"arm.{k}": v for k, v in arm.parameters().items()}
    if joint:
        params.update({f"refiner.{k}": v for k, v in refiner.parameters().items()})
    opt = AdamW(params, lr=cfg.lr_finetune, weight_decay=cfg.weight_decay)
    step0 = 0
    if resume is not None:
        rmeta, rarr = load_checkpoint(resume)
        if rmeta.get("stage") != "finetune":
            raise CheckpointError(f"{resume}: expected a finetune checkpoint")
        arm.load_arrays(_split(rarr, "arm."))
        refiner.load_arrays(_split(rarr, "refiner."))
        opt.load_state_arrays(_split(rarr, "opt."))
        step0 = int(rmeta["step"])
    seed_root = Rng(cfg.seed)
    rng_batch = seed_root.stream("fin.batch")
    rng_deg = seed_root.stream("fin.degrade")
    rng_lr = seed_root.stream("fin.lr")
    rng_ref = seed_root.stream("fin.refine")
    n = imgs.shape[0]
    vectors = tok.codebook.vectors
    final_n = cfg.schedule[-1] ** 2
    metrics: dict = {}
    for step in range(step0, cfg.finetune_steps):
        sel = rng_batch.at_step(step).integers(0, n, (cfg.batch_size,))
        batch = assemble_targets(imgs[sel], quality[sel], rng_deg.at_step(step))
        lr_batch = assemble_lr(batch, rng_lr.at_step(step), cfg.sr_factor)
        indices, z = tok.tokenize(batch)
        teacher = arm.teacher_inputs(indices, vectors)
        opt.zero_grad()
        logits, x_final = arm.forward_train(teacher, lr_images=lr_batch,
                                            quality_labels=quality[sel])
        ce = arm.token_loss(logits, indices)
        if joint:
            z0 = z.reshape(z.shape[0], final_n, cfg.latent_dim)
            rloss = refiner_mod.refiner_loss(refiner, z0, x_final, rng_ref.at_step(step))
            total_loss = ops.add(ce, ops.mul(rloss, cfg.refiner_weight))
        else:
            rloss = None
            total_loss = ce
        total_loss.backward()
        opt.lr = _lr_at(cfg.lr_finetune, step, cfg.finetune_steps, warmup=30)
        opt.step()
        metrics = {"step": step, "ce": float(ce.data),
                   "refiner": float(rloss.data) if rloss is not None else None}
        if step % 50 == 0 or step == cfg.finetune_steps - 1:
            extra = f" refine {metrics['refiner']:.4f}" if joint else ""
            _log(f"finetune step {step}/{cfg.finetune_steps} ce {metrics['ce']:.4f}{extra}",
                 quiet)
    arrays = {f"tokenizer.{k}": v for k, v in tok.arrays().items()}
    arrays.update({f"arm.{k}": v for k, v in arm.arrays().items()})
    arrays.update({f"refiner.{k}": v for k, v in refiner.arrays().items()})
    arrays.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    save_checkpoint(out_path, {"config": cfg.to_dict(), "stage": "finetune",
                               "step": cfg.finetune_steps}, arrays)
    return metrics


# -- inference ---------------------------------------------------------------------


def super_resolve(bundle: Bundle, lr_images: np.ndarray, seed: int,
                  cfg_scale: float | None = None, greedy: bool = False,
                  refine_steps: int | None = None) -> np.ndarray:
    """LR (B, s, s, 3) -> HR (B, S, S, 3) via tokens plus refined residual."""
    cfg = bundle.cfg
    if bundle.arm is None or bundle.refiner is None:
        raise CheckpointError("checkpoint lacks the finetuned generator")
    lam = cfg.cfg_scale if cfg_scale is None else cfg_scale
    steps = cfg.refine_steps if refine_steps is None else refine_steps
    rng = Rng(seed).stream("sr")
    vectors = bundle.tokenizer.codebook.vectors
    indices, aux, _ = bundle.arm.generate(vectors, rng.stream("tokens"),
                                          lr_images=lr_images, cfg_scale=lam,
                                          greedy=greedy)
    b = lr_images.shape[0]
    final = cfg.schedule[-1]
    recon = reconstruct_from_indices(indices, vectors, cfg.schedule, (final, final))
    x_pos = aux[POSITIVE]
    x_neg = aux.get(NEGATIVE)
    z = refiner_mod.sample(bundle.refiner, x_pos, rng.stream("refine"),
                           n_steps=steps, cond_neg=x_neg, lam=lam)
    latent = recon + z.reshape(b, final, final, cfg.latent_dim)
    return bundle.tokenizer.decode_latent(latent)


def evaluate(bundle: Bundle, val_manifest: str, out_csv: str, seed: int,
             cfg_scale: float | None = None, greedy: bool = False,
             quiet: bool = False) -> dict:
    """Super-resolve the validation split; CSV per image plus aggregates.

    The bicubic column upsamples the same LR input directly; the summary
    reports mean deltas of this model against that baseline.
    """
    imgs, classes, quality = load_corpus(val_manifest)
    rows = read_manifest(val_manifest)
    cfg = bundle.cfg
    deg_root = Rng(seed).stream("evaldeg")
    n = imgs.shape[0]
    records = []
    bs = cfg.batch_size
    for lo in range(0, n, bs):
        hi = min(lo + bs, n)
        lr = np.stack([degrade(imgs[i].astype(np.float64), deg_root.at_step(i),
                               factor=cfg.sr_factor).astype(np.float32)
                       for i in range(lo, hi)])
        sr = super_resolve(bundle, lr, seed + lo, cfg_scale=cfg_scale, greedy=greedy)
        for j, i in enumerate(range(lo, hi)):
            hr = imgs[i].astype(np.float64)
            up = np.clip(bicubic_resize(lr[j].astype(np.float64),
                                        (cfg.hr_size, cfg.hr_size)), 0.0, 1.0)
            records.append({
                "name": rows[i][0],
                "class_id": int(classes[i]),
                "psnr": psnr(sr[j].astype(np.float64), hr),
                "ssim": ssim(sr[j].astype(np.float64), hr),
                "psnr_bicubic": psnr(up, hr),
                "ssim_bicubic": ssim(up, hr),
            })
        _log(f"eval {hi}/{n}", quiet)
    agg = {
        "psnr": float(np.mean([r["psnr"] for r in records])),
        "ssim": float(np.mean([r["ssim"] for r in records])),
        "psnr_bicubic": float(np.mean([r["psnr_bicubic"] for r in records])),
        "ssim_bicubic": float(np.mean([r["ssim_bicubic"] for r in records])),
    }
    agg["psnr_delta"] = agg["psnr"] - agg["psnr_bicubic"]
    agg["ssim_delta"] = agg["ssim"] - agg["ssim_bicubic"]
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "class_id", "psnr", "ssim", "psnr_bicubic", "ssim_bicubic"])
        for r in records:
            w.writerow([r["name"], r["class_id"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}",
                        f"{r['psnr_bicubic']:.6f}", f"{r['ssim_bicubic']:.6f}"])
        w.writerow(["mean", "", f"{agg['psnr']:.6f}", f"{agg['ssim']:.6f}",
                    f"{agg['psnr_bicubic']:.6f}", f"{agg['ssim_bicubic']:.6f}"])
        w.writerow(["delta_vs_bicubic", "", f"{agg['psnr_delta']:.6f}",
                    f"{agg['ssim_delta']:.6f}", "", ""])
    return {"records": records, "aggregate": agg}


# -- accounting --------------------------------------------------------------------


def _geometry_counts(schedule: tuple, prefix_len: int) -> dict:
    sizes = [s * s for s in schedule]
    pairs = prefix_len * prefix_len
    seen = prefix_len
    for m in sizes:
        seen += m
        pairs += m * seen
    return {
        "schedule": list(schedule),
        "tokens_per_scale": sizes,
        "tokens_total": sum(sizes),
        "prefix_len": prefix_len,
        "sequence_len": prefix_len + sum(sizes),
        "attention_pairs": pairs,
    }


def bench(cfg: RunConfig) -> dict:
    """Static size/step accounting for the configured model and the
    publication-scale geometry, from the same formulas."""
    tok = make_tokenizer(cfg)
    arm = make_arm(cfg)
    ref = make_refiner(cfg)
    final = cfg.schedule[-1]
    prefix = final * final
    desk = {
        "condition_mode": _geometry_counts(cfg.schedule, prefix),
        "class_mode": _geometry_counts(cfg.schedule, 0),
        "params": {
            "tokenizer": int(sum(v.size for v in tok.arrays().values())),
            "transformer": int(sum(v.data.size for v in arm.params.values())),
            "refiner": int(sum(v.data.size for v in ref.params.values())),
        },
        "generation": {
            "scale_passes": len(cfg.schedule),
            "scale_passes_guided": 2 * len(cfg.schedule),
            "refine_steps": cfg.refine_steps,
            "refine_evals_guided": 2 * cfg.refine_steps,
        },
    }
    paper_final = cfg.paper_schedule[-1]
    paper = {
        "condition_mode": _geometry_counts(cfg.paper_schedule, paper_final * paper_final),
        "class_mode": _geometry_counts(cfg.paper_schedule, 0),
    }
    # consistency: the mask row sums must agree with the closed-form count
    mask_pairs = int(build_block_mask(cfg.schedule, prefix).sum())
    span_pairs = sum((q1 - q0) * kend
                     for q0, q1, kend in attention_spans(cfg.schedule, prefix))
    assert mask_pairs == desk["condition_mode"]["attention_pairs"] == span_pairs
    return {"desk": desk, "paper_scale": paper}