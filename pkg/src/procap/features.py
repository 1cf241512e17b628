"""Frozen patch encoder, trainable refinement, mask head, and mask pooling.

The encoder is a seeded random linear patch embedding plus a fixed 2-D
sinusoidal position table. Its arrays are plain ndarrays, never Tensors, so
they sit structurally outside the trainable set: no gradient can reach them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import DimensionMismatch
from .layers import conv2d, conv_transpose2d
from .tape import Tensor


@dataclass
class FeatureGrid:
    grid: Tensor                 # (Hf, Wf, C) or (B, Hf, Wf, C)
    resolution: str              # "coarse" | "refined"

    def __post_init__(self):
        if self.resolution not in ("coarse", "refined"):
            raise ValueError(f"bad resolution tag {self.resolution!r}")
        if not np.all(np.isfinite(self.grid.data)):
            raise ValueError("feature grid contains non-finite entries")


@dataclass
class MaskGrid:
    grid: Tensor                 # (Hf, Wf) or (B, Hf, Wf), values in [0, 1]
    kind: str                    # "predicted" | "target" | "binary"

    def __post_init__(self):
        if self.kind not in ("predicted", "target", "binary"):
            raise ValueError(f"bad mask kind {self.kind!r}")
        d = self.grid.data
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        if self.kind == "binary" and not np.all(np.isin(d, (0.0, 1.0))):
            raise ValueError("binary mask must contain only {0, 1}")


POS_SCALE = 0.3  # keeps position signal comparable to, not dominant over, content


def sinusoidal_2d(hf, wf, dim, dtype=np.float64, scale=POS_SCALE):
    """Fixed 2-D position table: half the channels encode row, half column."""
    if dim % 4 != 0:
        raise DimensionMismatch(f"position table needs dim divisible by 4, got {dim}")

    def enc(n, d):
        pos = np.arange(n, dtype=np.float64)[:, None]
        freq = 10000.0 ** (-2.0 * np.arange(d // 2, dtype=np.float64) / d)
        ang = pos * freq[None, :]
        out = np.zeros((n, d))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    rows = enc(hf, dim // 2)
    cols = enc(wf, dim // 2)
    table = np.zeros((hf, wf, dim))
    table[:, :, : dim // 2] = rows[:, None, :]
    table[:, :, dim // 2:] = cols[None, :, :]
    return (scale * table).astype(dtype)


class EncoderParams:
    """Frozen patch-linear encoder; reconstructible from (seed, dims)."""

    def __init__(self, patch_size=8, embed_dim=64, seed=7, dtype=np.float32):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        fan_in = patch_size * patch_size * 3
        self.weight = (rng.standard_normal((fan_in, embed_dim)) / np.sqrt(fan_in)).astype(self.dtype)
        self._pos_cache = {}

    def position_table(self, hf, wf):
        key = (hf, wf)
        if key not in self._pos_cache:
            self._pos_cache[key] = sinusoidal_2d(hf, wf, self.embed_dim, self.dtype)
        return self._pos_cache[key]


def encode(enc: EncoderParams, image) -> FeatureGrid:
    """Image(s) (H, W, 3) or (B, H, W, 3) in [0,1] -> coarse feature grid.

    Deterministic and gradient-free: the output is a constant of the tape.
    """
    img = np.asarray(image, dtype=enc.dtype)
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    B, H, W, C = img.shape
    p = enc.patch_size
    if C != 3 or H % p or W % p:
        raise DimensionMismatch(f"image {img.shape[1:]} not tileable by patch size {p}")
    hf, wf = H // p, W // p
    patches = img.reshape(B, hf, p, wf, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(B, hf, wf, p * p * 3)
    grid = patches @ enc.weight + enc.position_table(hf, wf)
    if not batched:
        grid = grid[0]
    return FeatureGrid(Tensor(grid), "coarse")


def refine(params, coarse: FeatureGrid, prefix="refine.") -> FeatureGrid:
    """Two stride-2 transposed convolutions (kernel 4, pad 1), tanh between.

    Spatial dims x4 total; differentiable in the input grid and the layer
    parameters.
    """
    x = coarse.grid if isinstance(coarse, FeatureGrid) else coarse
    h = conv_transpose2d(x, params[prefix + "w1"], params[prefix + "b1"], stride=2, pad=1)
    h = tape.tanh(h)
    h = conv_transpose2d(h, params[prefix + "w2"], params[prefix + "b2"], stride=2, pad=1)
    return FeatureGrid(h, "refined")


def segment(params, refined: FeatureGrid, prefix="seg.") -> MaskGrid:
    """3x3 conv -> tanh -> 3x3 conv -> logistic; preserves spatial dims."""
    x = refined.grid if isinstance(refined, FeatureGrid) else refined
    h = tape.tanh(conv2d(x, params[prefix + "w1"], params[prefix + "b1"], stride=1, pad=1))
    h = conv2d(h, params[prefix + "w2"], params[prefix + "b2"], stride=1, pad=1)
    logits = tape.reshape(h, h.shape[:-1])
    return MaskGrid(tape.sigmoid(logits), "predicted")


def mask_pool(refined: FeatureGrid, mask: MaskGrid) -> FeatureGrid:
    """Soft multiplicative gating: out(i,j,:) = mask(i,j) * grid(i,j,:)."""
    g = refined.grid if isinstance(refined, FeatureGrid) else refined
    m = mask.grid if isinstance(mask, MaskGrid) else mask
    if g.shape[:-1] != m.shape:
        raise DimensionMismatch(f"mask {m.shape} does not match grid {g.shape[:-1]}")
    gated = tape.mul(g, tape.reshape(m, m.shape + (1,)))
    return FeatureGrid(gated, "refined")


def downsample_gt_mask(gt_mask_pixel, grid_hw) -> MaskGrid:
    """Pixel-level binary mask -> per-cell coverage fraction at grid resolution."""
    m = np.asarray(gt_mask_pixel, dtype=np.float64)
    gh, gw = grid_hw
    H, W = m.shape
    if H % gh or W % gw:
        raise DimensionMismatch(f"pixel mask {m.shape} not divisible into {grid_hw} blocks")
    target = m.reshape(gh, H // gh, gw, W // gw).mean(axis=(1, 3))
    return MaskGrid(Tensor(target), "target")


def init_feature_params(store, cfg, rng, dtype):
    """Register refine + segment parameters (trainable set)."""
    cr = cfg.refined_channels
    d = cfg.encoder_dim
    sh = cfg.seg_hidden

    def w(shape):
        fan_in = int(np.prod(shape[:-1]))
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)

    store["refine.w1"] = Tensor(w((4, 4, d, cr)), requires_grad=True)
    store["refine.b1"] = Tensor(np.zeros(cr, dtype=dtype), requires_grad=True)
    store["refine.w2"] = Tensor(w((4, 4, cr, cr)), requires_grad=True)
    store["refine.b2"] = Tensor(np.zeros(cr, dtype=dtype), requires_grad=True)
    store["seg.w1"] = Tensor(w((3, 3, cr, sh)), requires_grad=True)
    store["seg.b1"] = Tensor(np.zeros(sh, dtype=dtype), requires_grad=True)
    store["seg.w2"] = Tensor(w((3, 3, sh, 1)), requires_grad=True)
    store["seg.b2"] = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)
