"""Block-causal next-scale transformer.

Sequence layout (condition mode): [prefix | scale 1 | scale 2 | ... | scale K]
where the prefix is the encoded LR condition map on final-scale geometry and
the scale-1 row is a learned projection of the pooled prefix.  Class mode
(pretraining) has no prefix; the scale-1 row is a class embedding.  Row i of
scale k holds the partial reconstruction accumulated over scales < k,
area-pooled onto scale-k geometry — the same context the residual quantizer
subtracts before choosing scale-k codes — and predicts token i of scale k.

Attention is block-causal: a row in scale k sees the prefix and every scale
<= k, realized as per-block dense attention over a key prefix, so no mask is
materialized in the hot path.  Prefix rows see only the prefix.  Rotation of
q/k uses the scale-aligned rotary tables; modulation is AdaLN (zero-init
conditioning weights, unit residual gates), conditioned on class+quality
(class mode) or quality (condition mode) embeddings.

Generation runs exactly one forward pass per scale with per-block KV caches;
only the first pass needs the block structure (the prefix must not attend to
the scale-1 row), later passes append rows that legitimately see everything
cached.
"""

from __future__ import annotations

import numpy as np

from . import guidance
from .numerics import Rng, Tensor, ops
from .numerics.tensor import no_grad
from .resample import area_downsample, bicubic_resize, bilinear_half_pixel
from .sarope import rope_apply, rope_tables

NEGATIVE, POSITIVE = 0, 1


def build_block_mask(schedule: tuple[int, ...], prefix_len: int) -> np.ndarray:
    """Boolean (L, L) visibility: row attends to prefix and scales <= its own.

    Reference shape for tests and attention-pair accounting; the forward
    pass never materializes it.
    """
    sizes = [s * s for s in schedule]
    length = prefix_len + sum(sizes)
    mask = np.zeros((length, length), dtype=bool)
    mask[:prefix_len, :prefix_len] = True
    offset = prefix_len
    for n in sizes:
        mask[offset : offset + n, : offset + n] = True
        offset += n
    return mask


def attention_spans(schedule: tuple[int, ...], prefix_len: int) -> list[tuple[int, int, int]]:
    """(q0, q1, kend) triples equivalent to build_block_mask row structure."""
    spans = []
    if prefix_len:
        spans.append((0, prefix_len, prefix_len))
    offset = prefix_len
    for s in schedule:
        n = s * s
        spans.append((offset, offset + n, offset + n))
        offset += n
    return spans


def scale_slices(schedule: tuple[int, ...], prefix_len: int) -> list[slice]:
    """Row range of each scale in the full sequence."""
    out = []
    offset = prefix_len
    for s in schedule:
        out.append(slice(offset, offset + s * s))
        offset += s * s
    return out


def _linear_param(rng: Rng, n_in: int, n_out: int, std: float = 0.02) -> Tensor:
    return Tensor(rng.truncated_normal((n_in, n_out), std=std, dtype=np.float32),
                  requires_grad=True)


class Arm:
    """Transformer over token pyramids with an LR-condition prefix."""

    def __init__(self, schedule: tuple[int, ...], vocab: int, latent_dim: int,
                 width: int, depth: int, heads: int, n_classes: int, seed: int,
                 sr_factor: int = 4, rope_base: float = 10000.0):
        if width % heads or (width // heads) % 4:
            raise ValueError("width must split into heads with head_dim divisible by 4")
        self.schedule = tuple(schedule)
        self.vocab = vocab
        self.latent_dim = latent_dim
        self.width = width
        self.depth = depth
        self.heads = heads
        self.n_classes = n_classes
        self.sr_factor = sr_factor
        self.head_dim = width // heads
        self.final_hw = (self.schedule[-1], self.schedule[-1])
        self.prefix_len = self.final_hw[0] * self.final_hw[1]
        self.tokens_len = sum(s * s for s in self.schedule)

        rng = Rng(seed).stream("arm")
        p: dict[str, Tensor] = {}
        p["in_proj.w"] = _linear_param(rng.stream("in_proj"), latent_dim, width)
        p["in_proj.b"] = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
        p["class_emb"] = Tensor(rng.stream("class").truncated_normal(
            (n_classes, width), std=0.02, dtype=np.float32), requires_grad=True)
        p["quality_emb"] = Tensor(rng.stream("quality").truncated_normal(
            (2, width), std=0.02, dtype=np.float32), requires_grad=True)
        p["start_proj.w"] = _linear_param(rng.stream("start"), width, width)
        p["start_proj.b"] = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
        # pyramid condition encoder: log2(sr_factor) stride-2 stages of 2 convs
        stages = int(np.log2(sr_factor))
        chans = [3] + [max(8, width >> (stages - i + 1)) for i in range(stages)]
        conv_rng = rng.stream("cond")
        for i in range(stages):
            cin, cout = chans[i], chans[i + 1]
            for sub, stride_cin in (("a", cin), ("b", cout)):
                w = conv_rng.stream(f"{i}{sub}").truncated_normal(
                    (cout, stride_cin, 3, 3), std=(2.0 / (stride_cin * 9)) ** 0.5,
                    dtype=np.float32)
                p[f"cond.{i}{sub}.w"] = Tensor(w, requires_grad=True)
                p[f"cond.{i}{sub}.b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        # Final 1x1 starts small: condition features enter the sequence softly
        # (near-neutral attention values) but nonzero, so both the start-token
        # projection and the prefix keys receive gradient immediately.
        p["cond.out.w"] = Tensor(conv_rng.stream("out").truncated_normal(
            (width, chans[-1], 1, 1), std=0.05, dtype=np.float32),
            requires_grad=True)
        p["cond.out.b"] = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
        self._cond_stages = stages
        for b in range(depth):
            br = rng.stream(f"block{b}")
            # Small q/k keeps early attention near-uniform: every query spreads
            # mass over the prefix and all visible scales, so gradient reaches
            # the condition encoder from the first step.  Large or structured
            # q/k inits saturate the softmax onto mutually similar token rows
            # and starve the prefix of gradient entirely.
            for name in ("wq", "wk", "wv", "wo"):
                p[f"block{b}.attn.{name}"] = _linear_param(br.stream(name), width, width)
            p[f"block{b}.mlp.w1"] = _linear_param(br.stream("w1"), width, 4 * width)
            p[f"block{b}.mlp.b1"] = Tensor(np.zeros(4 * width, dtype=np.float32), requires_grad=True)
            p[f"block{b}.mlp.w2"] = _linear_param(br.stream("w2"), 4 * width, width)
            p[f"block{b}.mlp.b2"] = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)
            # AdaLN: 6 modulation vectors per block.  Shifts, scales, and the
            # conditioning weights start at zero, but the two residual gates
            # start open (bias 1): a fully zero-gated trunk blocks gradient to
            # the attention/MLP paths and to the condition encoder for far
            # longer than a desk-scale step budget can afford.
            p[f"block{b}.ada.w"] = Tensor(np.zeros((width, 6 * width), dtype=np.float32),
                                          requires_grad=True)
            ada_b = np.zeros(6 * width, dtype=np.float32)
            ada_b[2 * width : 3 * width] = 1.0
            ada_b[5 * width : 6 * width] = 1.0
            p[f"block{b}.ada.b"] = Tensor(ada_b, requires_grad=True)
        p["final.ada.w"] = Tensor(np.zeros((width, 2 * width), dtype=np.float32), requires_grad=True)
        p["final.ada.b"] = Tensor(np.zeros(2 * width, dtype=np.float32), requires_grad=True)
        p["head.w"] = Tensor(np.zeros((width, vocab), dtype=np.float32), requires_grad=True)
        p["head.b"] = Tensor(np.zeros(vocab, dtype=np.float32), requires_grad=True)
        self.params = p

        hd = self.head_dim
        # The frequency base is a geometry knob: positions here span only the
        # final grid side, so a base far above that range leaves most rotary
        # pairs with near-identical angles and concentrates positional signal
        # in a few channels.
        self.rope_base = float(rope_base)
        self.rope_cond = rope_tables(self.schedule, self.final_hw, hd,
                                     prefix_hw=self.final_hw, base=self.rope_base)
        self.rope_class = rope_tables(self.schedule, self.final_hw, hd, base=self.rope_base)
        self.spans_cond = attention_spans(self.schedule, self.prefix_len)
        self.spans_class = attention_spans(self.schedule, 0)

    # -- parameter groups ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k, v in self.params.items():
            v.data = np.array(arrays[k], dtype=np.float32)

    # -- condition encoder ----------------------------------------------------------

    def encode_condition(self, lr_images: np.ndarray) -> Tensor:
        """LR (B, s, s, 3) -> prefix tokens (B, prefix_len, width).

        The LR input is bicubic-upsampled to HR size first, then strided
        convs bring it back down to final-scale geometry.
        """
        hr_side = self.schedule[-1] * self.sr_factor
        up = bicubic_resize(lr_images.astype(np.float64), (hr_side, hr_side))
        x = Tensor(np.ascontiguousarray(up.transpose(0, 3, 1, 2), dtype=np.float32))
        for i in range(self._cond_stages):
            x = ops.silu(ops.conv2d(x, self.params[f"cond.{i}a.w"], self.params[f"cond.{i}a.b"],
                                    stride=1, pad=1))
            x = ops.silu(ops.conv2d(x, self.params[f"cond.{i}b.w"], self.params[f"cond.{i}b.b"],
                                    stride=2, pad=1))
        x = ops.conv2d(x, self.params["cond.out.w"], self.params["cond.out.b"], stride=1, pad=0)
        b = x.shape[0]
        # (B, W, h, w) -> (B, h*w, W)
        return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (b, self.prefix_len, self.width))

    # -- teacher inputs ----------------------------------------------------------------

    def teacher_inputs(self, indices: list[np.ndarray], vectors: np.ndarray) -> np.ndarray:
        """Accumulated-reconstruction input rows for scales 2..K.

        The scale-k rows hold the sum of upsampled lookups of all scales < k,
        area-pooled onto scale-k geometry.  This mirrors the quantizer walk
        exactly: the scale-k target is the nearest codeword to
        (pooled latent - this row), so each row is the local context its own
        prediction is defined against.

        indices: per-scale (B, s, s) token maps. Returns (B, tokens_len - 1, d).
        """
        codes = vectors.astype(np.float32)
        b = indices[0].shape[0]
        recon = np.zeros((b, *self.final_hw, self.latent_dim), dtype=np.float32)
        parts = []
        for k in range(1, len(self.schedule)):
            s = self.schedule[k]
            recon = recon + bilinear_half_pixel(codes[indices[k - 1]], self.final_hw)
            pooled = area_downsample(recon, (s, s))
            parts.append(pooled.reshape(b, s * s, self.latent_dim))
        return np.concatenate(parts, axis=1)

    # -- forward -------------------------------------------------------------------------

    def _modulation(self, cond_vec: Tensor, b: int):
        """Per-block (shift, scale, gate) x2 plus final (shift, scale)."""
        mods = []
        c = ops.silu(cond_vec)
        for blk in range(self.depth):
            m = ops.linear(c, self.params[f"block{blk}.ada.w"], self.params[f"block{blk}.ada.b"])
            mods.append([ops.reshape(ops.getitem(m, (slice(None), slice(i * self.width, (i + 1) * self.width))),
                                     (b, 1, self.width)) for i in range(6)])
        fin = ops.linear(c, self.params["final.ada.w"], self.params["final.ada.b"])
        final_mods = [ops.reshape(ops.getitem(fin, (slice(None), slice(i * self.width, (i + 1) * self.width))),
                                  (b, 1, self.width)) for i in range(2)]
        return mods, final_mods

    def _split_heads(self, x: Tensor, b: int, length: int) -> Tensor:
        x = ops.reshape(x, (b, length, self.heads, self.head_dim))
        x = ops.transpose(x, (0, 2, 1, 3))
        return ops.reshape(x, (b * self.heads, length, self.head_dim))

    def _merge_heads(self, x: Tensor, b: int, length: int) -> Tensor:
        x = ops.reshape(x, (b, self.heads, length, self.head_dim))
        x = ops.transpose(x, (0, 2, 1, 3))
        return ops.reshape(x, (b, length, self.width))

    def _attention(self, x: Tensor, blk: int, spans, cos, sin, b: int, length: int,
                   cache: dict | None = None) -> Tensor:
        p = self.params
        q = self._split_heads(ops.linear(x, p[f"block{blk}.attn.wq"]), b, length)
        k = self._split_heads(ops.linear(x, p[f"block{blk}.attn.wk"]), b, length)
        v = self._split_heads(ops.linear(x, p[f"block{blk}.attn.wv"]), b, length)
        q = rope_apply(q, cos, sin)
        k = rope_apply(k, cos, sin)
        scale = 1.0 / np.sqrt(self.head_dim)
        if cache is None:
            att = ops.block_attention(q, k, v, spans, scale)
        else:
            # generation: append new rows, attend over everything cached
            key = f"block{blk}"
            if key in cache:
                k_all = np.concatenate([cache[key][0], k.data], axis=1)
                v_all = np.concatenate([cache[key][1], v.data], axis=1)
            else:
                k_all, v_all = k.data, v.data
            cache[key] = (k_all, v_all)
            att = ops.block_attention(q, Tensor(k_all), Tensor(v_all),
                                      [(0, length, k_all.shape[1])] if spans is None else spans,
                                      scale)
        att = self._merge_heads(att, b, length)
        return ops.linear(att, p[f"block{blk}.attn.wo"])

    def _backbone(self, x: Tensor, cond_vec: Tensor, spans, cos, sin,
                  cache: dict | None = None) -> Tensor:
        """Transformer blocks + final modulated norm; x is (B, L, width)."""
        b, length = x.shape[0], x.shape[1]
        mods, final_mods = self._modulation(cond_vec, b)
        one = 1.0
        for blk in range(self.depth):
            sh_a, sc_a, g_a, sh_m, sc_m, g_m = mods[blk]
            h = ops.layer_norm(x)
            h = ops.add(ops.mul(h, ops.add(sc_a, one)), sh_a)
            h = self._attention(h, blk, spans, cos, sin, b, length, cache)
            x = ops.add(x, ops.mul(g_a, h))
            h = ops.layer_norm(x)
            h = ops.add(ops.mul(h, ops.add(sc_m, one)), sh_m)
            h = ops.linear(h, self.params[f"block{blk}.mlp.w1"], self.params[f"block{blk}.mlp.b1"])
            h = ops.silu(h)
            h = ops.linear(h, self.params[f"block{blk}.mlp.w2"], self.params[f"block{blk}.mlp.b2"])
            x = ops.add(x, ops.mul(g_m, h))
        sh_f, sc_f = final_mods
        x = ops.layer_norm(x)
        return ops.add(ops.mul(x, ops.add(sc_f, one)), sh_f)

    def _cond_vector(self, class_ids, quality_labels) -> Tensor:
        parts = []
        if class_ids is not None:
            parts.append(ops.embedding(self.params["class_emb"], np.asarray(class_ids)))
        if quality_labels is not None:
            parts.append(ops.embedding(self.params["quality_emb"], np.asarray(quality_labels)))
        out = parts[0]
        for extra in parts[1:]:
            out = ops.add(out, extra)
        return out

    def forward_train(self, teacher: np.ndarray, *, class_ids=None, quality_labels=None,
                      lr_images: np.ndarray | None = None,
                      teacher_tensor: Tensor | None = None):
        """Teacher-forced pass.

        teacher: (B, tokens_len - 1, d) interpolated previous-scale inputs
        (see teacher_inputs).  Condition mode needs lr_images; class mode
        needs class_ids.  Returns (logits (B, tokens_len, vocab), x_final
        (B, final_tokens, width)).
        """
        cond_mode = lr_images is not None
        tt = teacher_tensor if teacher_tensor is not None else Tensor(teacher.astype(np.float32))
        b = tt.shape[0]
        tok = ops.linear(tt, self.params["in_proj.w"], self.params["in_proj.b"])
        if cond_mode:
            prefix = self.encode_condition(lr_images)
            pooled = ops.mean(prefix, axis=1)
            start = ops.linear(pooled, self.params["start_proj.w"], self.params["start_proj.b"])
            start = ops.reshape(start, (b, 1, self.width))
            seq = ops.concat([prefix, start, tok], axis=1)
            spans, (cos, sin) = self.spans_cond, self.rope_cond
        else:
            start = ops.reshape(ops.embedding(self.params["class_emb"], np.asarray(class_ids)),
                                (b, 1, self.width))
            seq = ops.concat([start, tok], axis=1)
            spans, (cos, sin) = self.spans_class, self.rope_class
        cond_vec = self._cond_vector(class_ids if not cond_mode else None,
                                     quality_labels if quality_labels is not None
                                     else np.full(b, POSITIVE, dtype=np.int64))
        x = self._backbone(seq, cond_vec, spans, cos, sin)
        prefix_len = self.prefix_len if cond_mode else 0
        rows = ops.getitem(x, (slice(None), slice(prefix_len, prefix_len + self.tokens_len)))
        logits = ops.linear(rows, self.params["head.w"], self.params["head.b"])
        final_n = self.schedule[-1] ** 2
        x_final = ops.getitem(x, (slice(None), slice(prefix_len + self.tokens_len - final_n,
                                                     prefix_len + self.tokens_len)))
        return logits, x_final

    def token_loss(self, logits: Tensor, indices: list[np.ndarray]) -> Tensor:
        """Mean cross entropy over every token position in the pyramid."""
        b = logits.shape[0]
        targets = np.concatenate([idx.reshape(b, -1) for idx in indices], axis=1)
        flat = ops.reshape(logits, (b * self.tokens_len, self.vocab))
        return ops.cross_entropy(flat, targets.reshape(-1))

    # -- generation ---------------------------------------------------------------------

    def generate(self, vectors: np.ndarray, rng: Rng, *, class_ids=None,
                 lr_images: np.ndarray | None = None, cfg_scale: float = 0.0,
                 greedy: bool = False, temperature: float = 1.0,
                 collect_logits: bool = False):
        """Sample a token pyramid in exactly len(schedule) forward passes.

        Image-space guidance runs positive (high-quality) and negative
        branches as two sequential cached passes per scale and combines
        logits before sampling; cfg_scale 0 never touches the negative
        branch, so it is bit-identical to a plain positive pass.  Returns
        (indices, aux, n_forward_passes) where aux maps each evaluated
        quality branch to its final-scale hidden states (B, final_tokens,
        width) and, with collect_logits, aux["logits"] holds the positive
        branch's per-scale logits.
        """
        cond_mode = lr_images is not None
        b = lr_images.shape[0] if cond_mode else len(np.asarray(class_ids))
        with no_grad():
            branches = [POSITIVE] + ([NEGATIVE] if cfg_scale > 0 else [])
            states = {}
            for quality in branches:
                if cond_mode:
                    cond_vec = self._cond_vector(None, np.full(b, quality, dtype=np.int64))
                else:
                    cond_vec = self._cond_vector(np.asarray(class_ids),
                                                 np.full(b, quality, dtype=np.int64))
                states[quality] = {"cache": {}, "cond_vec": cond_vec, "x_final": None}
            if cond_mode:
                prefix = self.encode_condition(lr_images)
                pooled = ops.mean(prefix, axis=1)
                start = ops.reshape(
                    ops.linear(pooled, self.params["start_proj.w"], self.params["start_proj.b"]),
                    (b, 1, self.width))
                first_seq = ops.concat([prefix, start], axis=1)
                first_spans = [(0, self.prefix_len, self.prefix_len),
                               (self.prefix_len, self.prefix_len + 1, self.prefix_len + 1)]
            else:
                first_seq = ops.reshape(ops.embedding(self.params["class_emb"],
                                                      np.asarray(class_ids)),
                                        (b, 1, self.width))
                first_spans = [(0, 1, 1)]
            cos_full, sin_full = self.rope_cond if cond_mode else self.rope_class
            prefix_len = self.prefix_len if cond_mode else 0

            indices: list[np.ndarray] = []
            logit_trace: list[np.ndarray] = []
            passes = 0
            codes = vectors.astype(np.float32)
            recon = np.zeros((b, *self.final_hw, self.latent_dim), dtype=np.float32)
            row0 = prefix_len  # sequence offset of the current scale's rows
            for k, s in enumerate(self.schedule):
                n = s * s
                if k == 0:
                    seq_data = first_seq
                    spans = first_spans
                    cos = cos_full[: prefix_len + 1]
                    sin = sin_full[: prefix_len + 1]
                else:
                    recon = recon + bilinear_half_pixel(codes[indices[-1]], self.final_hw)
                    pooled = area_downsample(recon, (s, s))
                    tok = Tensor(pooled.reshape(b, n, self.latent_dim))
                    seq_data = ops.linear(tok, self.params["in_proj.w"], self.params["in_proj.b"])
                    spans = None
                    cos = cos_full[row0 : row0 + n]
                    sin = sin_full[row0 : row0 + n]
                per_branch_logits = {}
                for quality in branches:
                    st = states[quality]
                    x = self._backbone(seq_data, st["cond_vec"], spans, cos, sin,
                                       cache=st["cache"])
                    rows = x.data[:, -n:] if k == 0 else x.data
                    logits = rows @ self.params["head.w"].data + self.params["head.b"].data
                    per_branch_logits[quality] = logits
                    if k == len(self.schedule) - 1:
                        st["x_final"] = rows
                    passes += 1
                if collect_logits:
                    logit_trace.append(per_branch_logits[POSITIVE])
                lam = guidance.lambda_ramp(k + 1, len(self.schedule), cfg_scale)
                if cfg_scale > 0:
                    combined = guidance.combine(per_branch_logits[POSITIVE],
                                                per_branch_logits[NEGATIVE], lam)
                else:
                    combined = per_branch_logits[POSITIVE]
                idx = guidance.sample_tokens(combined, rng.at_step(k), greedy=greedy,
                                             temperature=temperature)
                indices.append(idx.reshape(b, s, s))
                row0 += n
        aux = {q: states[q]["x_final"] for q in branches}
        if collect_logits:
            aux["logits"] = logit_trace
        return indices, aux, passes