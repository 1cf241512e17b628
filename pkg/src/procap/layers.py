"""Neural building blocks on the tape: linear, layer norm, attention, convs.

Array layout conventions:
  feature maps   (B, H, W, C)  or unbatched (H, W, C)
  token stacks   (B, L, D)     or unbatched (L, D)
  conv weights   (KH, KW, Cin, Cout)
"""

from __future__ import annotations

import math

import numpy as np

from . import tape
from .errors import DimensionMismatch
from .tape import Tensor


def linear(x, w, b=None):
    y = tape.matmul(x, w)
    if b is not None:
        y = tape.add(y, b)
    return y


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = tape.mean(x, axis=-1, keepdims=True)
    centered = tape.sub(x, mu)
    var = tape.mean(tape.mul(centered, centered), axis=-1, keepdims=True)
    inv = tape.div(centered, tape.sqrt(var + eps))
    return tape.add(tape.mul(inv, gain), bias)


def ffn(x, w1, b1, w2, b2):
    return linear(tape.tanh(linear(x, w1, b1)), w2, b2)


def split_heads(x, n_heads):
    # (..., L, D) -> (..., H, L, D/H)
    *lead, L, D = x.shape
    if D % n_heads != 0:
        raise DimensionMismatch(f"model dim {D} not divisible by {n_heads} heads")
    x = tape.reshape(x, (*lead, L, n_heads, D // n_heads))
    return tape.swapaxes(x, -2, -3)


def merge_heads(x):
    # (..., H, L, Dh) -> (..., L, H*Dh)
    x = tape.swapaxes(x, -2, -3)
    *lead, L, H, Dh = x.shape
    return tape.reshape(x, (*lead, L, H * Dh))


def attention(q_in, kv_in, p, n_heads, mask=None, invariant=False):
    """Multi-head attention of q_in over kv_in.

    p is a dict with wq, wk, wv, wo (D, D) and bq, bk, bv, bo (D,).
    mask, if given, is an additive (Lq, Lk) constant (0 or -inf).
    With invariant=True both the softmax denominator and the value-weighted
    sum reduce in sorted order, making the output bitwise invariant to
    permutations of the kv rows.
    """
    D = q_in.shape[-1]
    q = split_heads(linear(q_in, p["wq"], p["bq"]), n_heads)
    k = split_heads(linear(kv_in, p["wk"], p["bk"]), n_heads)
    v = split_heads(linear(kv_in, p["wv"], p["bv"]), n_heads)
    scale = 1.0 / math.sqrt(D // n_heads)
    scores = tape.matmul(q, tape.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        scores = tape.add(scores, Tensor(mask.astype(scores.dtype)))
    w = tape.softmax(scores, axis=-1, invariant=invariant)
    if invariant:
        # contributions (..., H, Lq, Lk, Dh), reduced over Lk in sorted order
        wl = tape.reshape(w, w.shape + (1,))
        vl = tape.reshape(v, v.shape[:-2] + (1,) + v.shape[-2:])
        ctx = tape.sorted_sum(tape.mul(wl, vl), axis=-2)
    else:
        ctx = tape.matmul(w, v)
    return linear(merge_heads(ctx), p["wo"], p["bo"])


def causal_mask(n, dtype=np.float64):
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def _leading(x):
    """Flatten a (B, H, W, C) or (H, W, C) array to (B, H, W, C)."""
    if x.ndim == 3:
        return x[None], True
    return x, False


def conv2d(x, w, b, stride=1, pad=0):
    """Cross-correlation. x (B,H,W,Cin) or (H,W,Cin); w (KH,KW,Cin,Cout)."""
    kh, kw, cin, cout = w.shape
    xd, squeezed = _leading(x.data)
    if xd.shape[-1] != cin:
        raise DimensionMismatch(f"conv2d: {xd.shape[-1]} input channels, weight expects {cin}")
    B, H, W, _ = xd.shape
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]                      # (B, oh, ow, Cin, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * oh * ow, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out_data = (cols @ wmat).reshape(B, oh, ow, cout) + b.data
    if squeezed:
        out_data = out_data[0]

    def bw(g):
        gd = g[None] if squeezed else g
        gflat = gd.reshape(B * oh * ow, cout)
        tape._accum(w, (cols.T @ gflat).reshape(w.data.shape))
        tape._accum(b, gd.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            dcols = (gflat @ wmat.T).reshape(B, oh, ow, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for c in range(kw):
                    dxp[:, a:a + stride * oh:stride, c:c + stride * ow:stride] += dcols[:, :, :, a, c]
            dx = dxp[:, pad:pad + H, pad:pad + W] if pad else dxp
            tape._accum(x, dx[0] if squeezed else dx)

    return tape._node(out_data, (x, w, b), bw)


def conv_transpose2d(x, w, b, stride=2, pad=1):
    """Transposed convolution (adjoint of conv2d w.r.t. its input).

    x (B,h,w,Cin) or (h,w,Cin); w (KH,KW,Cin,Cout).
    Output spatial size: stride*(n-1) + KH - 2*pad per axis.
    """
    kh, kw, cin, cout = w.shape
    xd, squeezed = _leading(x.data)
    if xd.shape[-1] != cin:
        raise DimensionMismatch(f"conv_transpose2d: {xd.shape[-1]} input channels, weight expects {cin}")
    B, h, wd_, _ = xd.shape
    oh = stride * (h - 1) + kh - 2 * pad
    ow = stride * (wd_ - 1) + kw - 2 * pad
    # every input cell scatters a (kh, kw, Cout) stamp
    wmat = w.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    stamps = (xd.reshape(B * h * wd_, cin) @ wmat).reshape(B, h, wd_, kh, kw, cout)
    buf = np.zeros((B, oh + 2 * pad, ow + 2 * pad, cout), dtype=xd.dtype)
    for a in range(kh):
        for c in range(kw):
            buf[:, a:a + stride * h:stride, c:c + stride * wd_:stride] += stamps[:, :, :, a, c]
    out_data = buf[:, pad:pad + oh, pad:pad + ow] + b.data
    if squeezed:
        out_data = out_data[0]

    def bw(g):
        gd = g[None] if squeezed else g
        gp = np.pad(gd, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        # gather the stamp windows back: gwin[b,i,j,a,c,:] = gp[b, s*i+a, s*j+c, :]
        gwin = np.empty((B, h, wd_, kh, kw, cout), dtype=gd.dtype)
        for a in range(kh):
            for c in range(kw):
                gwin[:, :, :, a, c] = gp[:, a:a + stride * h:stride, c:c + stride * wd_:stride]
        gflat = gwin.reshape(B * h * wd_, kh * kw * cout)
        dwm = xd.reshape(B * h * wd_, cin).T @ gflat                 # (Cin, kh*kw*Cout)
        tape._accum(w, dwm.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3))
        tape._accum(b, gd.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            dx = (gflat @ wmat.T).reshape(B, h, wd_, cin)
            tape._accum(x, dx[0] if squeezed else dx)

    return tape._node(out_data, (x, w, b), bw)
