"""Differentiable operations on Tensors.

Forward paths are plain numpy; each op wires a backward closure following
the gradient ownership rule documented in tensor.py (donate out.grad to at
most one parent, fresh arrays for the rest, never a read-only view).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor, accum, as_tensor, grad_enabled, make, unbroadcast


def _coerce(a, b):
    """Promote python scalars to the partner tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_data = a.data + b.data
    track = a.requires_grad or b.requires_grad

    def backward():
        g = out.grad
        donated = False
        if a.requires_grad:
            ga = unbroadcast(g, a.data.shape)
            accum(a, ga)
            donated = ga is g
        if b.requires_grad:
            gb = unbroadcast(g, b.data.shape)
            accum(b, gb.copy() if (gb is g and donated) else gb)

    out = make(out_data, (a, b), backward, track)
    return out


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_data = a.data - b.data
    track = a.requires_grad or b.requires_grad

    def backward():
        g = out.grad
        if a.requires_grad:
            accum(a, unbroadcast(g, a.data.shape))
        if b.requires_grad:
            gb = unbroadcast(-g, b.data.shape)
            accum(b, gb)

    out = make(out_data, (a, b), backward, track)
    return out


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_data = a.data * b.data
    track = a.requires_grad or b.requires_grad

    def backward():
        g = out.grad
        if a.requires_grad:
            accum(a, unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            accum(b, unbroadcast(g * a.data, b.data.shape))

    out = make(out_data, (a, b), backward, track)
    return out


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_data = a.data / b.data
    track = a.requires_grad or b.requires_grad

    def backward():
        g = out.grad
        if a.requires_grad:
            accum(a, unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            accum(b, unbroadcast(-g * out.data / b.data, b.data.shape))

    out = make(out_data, (a, b), backward, track)
    return out


def pow_scalar(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data**exponent

    def backward():
        accum(a, out.grad * exponent * a.data ** (exponent - 1))

    out = make(out_data, (a,), backward, a.requires_grad)
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    out_data = a.data * a.data

    def backward():
        accum(a, out.grad * (2.0 * a.data))

    out = make(out_data, (a,), backward, a.requires_grad)
    return out


# -- shape manipulation -------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    out_data = a.data.reshape(shape)

    def backward():
        accum(a, out.grad.reshape(a.data.shape))

    out = make(out_data, (a,), backward, a.requires_grad)
    return out


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.transpose(axes) if axes is not None else a.data.T
    if axes is not None:
        inverse = tuple(np.argsort(axes))
    else:
        inverse = None

    def backward():
        g = out.grad.transpose(inverse) if inverse is not None else out.grad.T
        # transposed views are fine to donate but must be writable targets
        # for later in-place adds, so materialize.
        accum(a, np.ascontiguousarray(g))

    out = make(out_data, (a,), backward, a.requires_grad)
    return out


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    track = any(p.requires_grad for p in parts)
    sizes = [p.data.shape[axis] for p in parts]

    def backward():
        g = out.grad
        offset = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                accum(p, np.ascontiguousarray(g[tuple(sl)]))
            offset += size

    out = make(out_data, tuple(parts), backward, track)
    return out


def _is_advanced_index(idx) -> bool:
    if isinstance(idx, (np.ndarray, list)):
        return True
    if isinstance(idx, tuple):
        return any(isinstance(i, (np.ndarray, list)) for i in idx)
    return False


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[idx]
    advanced = _is_advanced_index(idx)

    def backward():
        g = np.zeros_like(a.data)
        if advanced:
            # += would drop repeated indices; add.at accumulates them.
            np.add.at(g, idx, out.grad)
        else:
            g[idx] += out.grad
        accum(a, g)

    out = make(out_data, (a,), backward, a.requires_grad)
    return out


# -- reductions ---------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accum(a, np.broadcast_to(g, a.data.shape).copy())

    out = make(out_data, (a,), backward, a.requires_grad)
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out_data.size

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        scaled = g / np.asarray(count, dtype=a.data.dtype)
        accum(a, np.broadcast_to(scaled, a.data.shape).copy())

    out = make(out_data, (a,), backward, a.requires_grad)
    return out


# -- linear algebra -----------------------------------------------------------


def _reduce_matmul_grad(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a matmul operand gradient down to the operand's shape.

    np.matmul broadcasts leading batch dims; a 2D weight used against a
    batched activation receives one gradient slab per batch element, which
    must be summed away.
    """
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax in range(g.ndim - 2):
        if shape[ax] == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    """a @ b for 2D or batched operands; batch dims broadcast as numpy does."""
    a, b = _coerce(a, b)
    out_data = np.matmul(a.data, b.data)
    track = a.requires_grad or b.requires_grad

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            accum(a, _reduce_matmul_grad(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            accum(b, _reduce_matmul_grad(gb, b.data.shape))

    out = make(out_data, (a, b), backward, track)
    return out


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b); w is (in, out)."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def embedding(table, idx) -> Tensor:
    """Row gather: table is (V, d), idx is any int array."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    out_data = table.data[idx]

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, idx.reshape(-1), out.grad.reshape(-1, table.data.shape[-1]))
        accum(table, g)

    out = make(out_data, (table,), backward, table.requires_grad)
    return out


# -- nonlinearities and normalization ------------------------------------------


def silu(a) -> Tensor:
    a = as_tensor(a)
    # tanh form of the logistic avoids exp overflow for large |a|
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out_data = a.data * sig

    def backward():
        accum(a, out.grad * (sig * (1.0 + a.data * (1.0 - sig))))

    out = make(out_data, (a,), backward, a.requires_grad)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=axis, keepdims=True)
    out_data = shifted

    def backward():
        if axis in (-1, out.data.ndim - 1):
            accum(a, kernels.softmax_grad(out.data, out.grad))
        else:
            t = out.data * out.grad
            accum(a, t - out.data * t.sum(axis=axis, keepdims=True))

    out = make(out_data, (a,), backward, a.requires_grad)
    return out


def layer_norm(a, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=a.data.dtype))
    out_data = xc * inv

    def backward():
        g = out.grad
        y = out.data
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        accum(a, inv * (g - gm - y * gym))

    out = make(out_data, (a,), backward, a.requires_grad)
    return out


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    logits: (N, V); targets: (N,) int.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    expz = np.exp(z)
    norm = expz.sum(axis=-1, keepdims=True)
    probs = expz / norm
    logp = z - np.log(norm)
    n = logits.data.shape[0]
    out_data = np.asarray(-logp[np.arange(n), targets].mean(), dtype=logits.dtype)

    def backward():
        g = probs.copy()
        g[np.arange(n), targets] -= 1.0
        g *= out.grad / np.asarray(n, dtype=logits.dtype)
        accum(logits, g)

    out = make(out_data, (logits,), backward, logits.requires_grad)
    return out


# -- convolution and resampling -------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Strided view (B, ho, wo, C, kh, kw) over a padded NCHW array."""
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    shape = (b, ho, wo, c, kh, kw)
    strides = (sb, sh * stride, sw * stride, sc, sh, sw)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW convolution; w is (Cout, Cin, kh, kw)."""
    x = as_tensor(x)
    w = as_tensor(w)
    bt = as_tensor(b) if b is not None else None
    bsz, cin, h, wdt = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _windows(xp, kh, kw, stride, ho, wo).reshape(bsz * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out_mat = cols @ wmat.T
    if bt is not None:
        out_mat += bt.data
    out_data = np.ascontiguousarray(out_mat.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))
    track = x.requires_grad or w.requires_grad or (bt is not None and bt.requires_grad)

    def backward():
        g_mat = out.grad.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, cout)
        if bt is not None and bt.requires_grad:
            accum(bt, g_mat.sum(axis=0))
        if w.requires_grad:
            # im2col is recomputed here instead of saved: the column matrix
            # is the largest buffer in the whole VAE graph.
            xp2 = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
            cols2 = _windows(xp2, kh, kw, stride, ho, wo).reshape(bsz * ho * wo, cin * kh * kw)
            accum(w, (g_mat.T @ cols2).reshape(w.data.shape))
        if x.requires_grad:
            dcols = (g_mat @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
            dxp = np.zeros_like(xp) if pad else np.zeros_like(x.data)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[
                        :, :, :, :, ki, kj
                    ].transpose(0, 3, 1, 2)
            accum(x, dxp[:, :, pad : pad + h, pad : pad + wdt] if pad else dxp)

    parents = (x, w) if bt is None else (x, w, bt)
    out = make(out_data, parents, backward, track)
    return out


def upsample_nearest(x, factor: int) -> Tensor:
    """NCHW nearest-neighbour upsampling by an integer factor."""
    x = as_tensor(x)
    out_data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward():
        b, c, h, w = x.data.shape
        g = out.grad.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5))
        accum(x, g)

    out = make(out_data, (x,), backward, x.requires_grad)
    return out


# -- attention -----------------------------------------------------------------


def block_attention(q, k, v, spans, scale: float) -> Tensor:
    """Attention over dense spans: queries [q0:q1) see keys [0:kend).

    q, k, v: (N, L, hd) with heads folded into N.  spans is a list of
    (q0, q1, kend) covering [0, L) in order; each query block runs a dense
    softmax over its visible prefix of keys, so no mask is materialized.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    n, length, hd = q.data.shape
    out_data = np.empty_like(q.data)
    probs = []
    sc = np.asarray(scale, dtype=q.data.dtype)
    for q0, q1, kend in spans:
        # scale q first: q1-q0 rows of hd instead of kend scores per row
        s = np.matmul(q.data[:, q0:q1] * sc, np.swapaxes(k.data[:, :kend], 1, 2))
        kernels.softmax_rows(s)
        probs.append(s)
        out_data[:, q0:q1] = np.matmul(s, v.data[:, :kend])
    track = q.requires_grad or k.requires_grad or v.requires_grad

    def backward():
        g = out.grad
        dq = np.zeros_like(q.data)
        dk = np.zeros_like(k.data)
        dv = np.zeros_like(v.data)
        for (q0, q1, kend), p in zip(spans, probs):
            gslice = g[:, q0:q1]
            dv[:, :kend] += np.matmul(np.swapaxes(p, 1, 2), gslice)
            dp = np.matmul(gslice, np.swapaxes(v.data[:, :kend], 1, 2))
            ds = kernels.softmax_grad(p, dp)
            ds *= sc
            dq[:, q0:q1] = np.matmul(ds, k.data[:, :kend])
            dk[:, :kend] += np.matmul(np.swapaxes(ds, 1, 2), q.data[:, q0:q1])
        if q.requires_grad:
            accum(q, dq)
        if k.requires_grad:
            accum(k, dk)
        if v.requires_grad:
            accum(v, dv)

    out = make(out_data, (q, k, v), backward, track)
    return out
