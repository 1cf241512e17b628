"""Vision features: frozen encoder, refinement, segmentation head, pooling."""

import numpy as np
import pytest

from procap import features as F
from procap import tape
from procap.config import ModelConfig
from procap.errors import DimensionMismatch
from procap.tape import Tensor

from gradcheck import check_grads, random_functional
from oracles import block_mean_oracle, mask_pool_oracle


def _params(cfg=None, seed=0, dtype=np.float64):
    cfg = cfg or ModelConfig()
    store = {}
    F.init_feature_params(store, cfg, np.random.default_rng(seed), dtype)
    return store


def test_encode_shape_and_determinism():
    enc = F.EncoderParams(patch_size=8, embed_dim=64, seed=7)
    img = np.random.default_rng(0).uniform(0, 1, (64, 64, 3))
    g1 = F.encode(enc, img)
    g2 = F.encode(enc, img)
    assert g1.grid.shape == (8, 8, 64)
    assert g1.resolution == "coarse"
    assert np.array_equal(g1.grid.data, g2.grid.data)
    # reconstructible from seed + dims
    enc2 = F.EncoderParams(patch_size=8, embed_dim=64, seed=7)
    assert np.array_equal(F.encode(enc2, img).grid.data, g1.grid.data)


def test_encode_zero_image_gives_position_table():
    enc = F.EncoderParams(patch_size=8, embed_dim=64, seed=3)
    grid = F.encode(enc, np.zeros((64, 64, 3))).grid.data
    assert np.array_equal(grid, enc.position_table(8, 8))


def test_encode_rejects_untileable_dims():
    enc = F.EncoderParams(patch_size=8, embed_dim=64)
    with pytest.raises(DimensionMismatch):
        F.encode(enc, np.zeros((60, 64, 3)))


def test_encoder_not_trainable():
    # encoder arrays are plain ndarrays outside the parameter store
    enc = F.EncoderParams()
    assert not isinstance(enc.weight, Tensor)
    out = F.encode(enc, np.zeros((64, 64, 3)))
    assert not out.grid.requires_grad and out.grid._backward is None


def test_refine_shapes():
    cfg = ModelConfig()
    p = _params(cfg)
    coarse = F.FeatureGrid(Tensor(np.random.default_rng(1).standard_normal((8, 8, 64))), "coarse")
    refined = F.refine(p, coarse)
    assert refined.grid.shape == (32, 32, 32)
    assert refined.resolution == "refined"
    batched = F.FeatureGrid(Tensor(np.zeros((3, 8, 8, 64))), "coarse")
    assert F.refine(p, batched).grid.shape == (3, 32, 32, 32)


def test_refine_zero_input_zero_bias_gives_zero():
    p = _params()
    for k in p:
        if k.startswith("refine.b"):
            p[k].data[:] = 0.0
    out = F.refine(p, F.FeatureGrid(Tensor(np.zeros((4, 4, 64))), "coarse"))
    assert np.all(out.grid.data == 0.0)


def test_segment_zero_head_gives_half():
    cfg = ModelConfig()
    p = _params(cfg)
    for k in ("seg.w1", "seg.b1", "seg.w2", "seg.b2"):
        p[k].data[:] = 0.0
    refined = F.FeatureGrid(Tensor(np.random.default_rng(2).standard_normal((16, 16, 32))), "refined")
    mask = F.segment(p, refined)
    assert mask.grid.shape == (16, 16)
    assert np.all(mask.grid.data == 0.5)


def test_segment_open_unit_interval():
    p = _params()
    refined = F.FeatureGrid(Tensor(np.random.default_rng(3).standard_normal((16, 16, 32)) * 5), "refined")
    m = F.segment(p, refined).grid.data
    assert np.all(m > 0) and np.all(m < 1)


def test_mask_pool_identity_and_null_gates():
    g = Tensor(np.random.default_rng(4).standard_normal((6, 6, 5)))
    grid = F.FeatureGrid(g, "refined")
    ones = F.MaskGrid(Tensor(np.ones((6, 6))), "binary")
    zeros = F.MaskGrid(Tensor(np.zeros((6, 6))), "binary")
    assert np.array_equal(F.mask_pool(grid, ones).grid.data, g.data)
    assert np.all(F.mask_pool(grid, zeros).grid.data == 0.0)


def test_mask_pool_matches_loop_oracle():
    rng = np.random.default_rng(5)
    for _ in range(25):
        g = rng.standard_normal((5, 7, 4))
        m = rng.uniform(0, 1, (5, 7))
        got = F.mask_pool(F.FeatureGrid(Tensor(g), "refined"),
                          F.MaskGrid(Tensor(m), "predicted")).grid.data
        assert np.array_equal(got, mask_pool_oracle(g, m))


def test_mask_pool_gating_linearity():
    rng = np.random.default_rng(6)
    g = F.FeatureGrid(Tensor(rng.standard_normal((4, 4, 3))), "refined")
    m1 = rng.uniform(0, 1, (4, 4))
    m2 = rng.uniform(0, 1, (4, 4))
    a, b = 0.25, 0.5
    combo = F.mask_pool(g, F.MaskGrid(Tensor(a * m1 + b * m2), "predicted")).grid.data
    sep = (a * F.mask_pool(g, F.MaskGrid(Tensor(m1), "predicted")).grid.data
           + b * F.mask_pool(g, F.MaskGrid(Tensor(m2), "predicted")).grid.data)
    assert np.allclose(combo, sep, atol=1e-12)


def test_mask_pool_dim_mismatch():
    g = F.FeatureGrid(Tensor(np.zeros((4, 4, 3))), "refined")
    m = F.MaskGrid(Tensor(np.zeros((5, 4))), "predicted")
    with pytest.raises(DimensionMismatch):
        F.mask_pool(g, m)


def test_downsample_gt_mask_trivial_and_oracle():
    assert np.all(F.downsample_gt_mask(np.ones((64, 64)), (32, 32)).grid.data == 1.0)
    half = np.zeros((4, 4))
    half[:, :2] = 1.0
    out = F.downsample_gt_mask(half, (2, 2)).grid.data
    assert np.array_equal(out, np.array([[1.0, 0.0], [1.0, 0.0]]))
    rng = np.random.default_rng(7)
    for _ in range(25):
        m = (rng.uniform(0, 1, (24, 16)) > 0.5).astype(float)
        got = F.downsample_gt_mask(m, (6, 4)).grid.data
        assert np.allclose(got, block_mean_oracle(m, 6, 4), atol=1e-15)


def test_downsample_half_covered_block():
    m = np.zeros((2, 2))
    m[0, :] = 1.0
    assert F.downsample_gt_mask(m, (1, 1)).grid.data[0, 0] == 0.5


def test_downsample_dim_mismatch():
    with pytest.raises(DimensionMismatch):
        F.downsample_gt_mask(np.ones((10, 10)), (3, 3))


def test_refine_and_segment_gradcheck():
    cfg = ModelConfig(refined_channels=4, seg_hidden=3, encoder_dim=8)
    p = _params(cfg, seed=8)
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((2, 2, 8)), requires_grad=True)
    coef_r = random_functional(rng, (8, 8, 4))
    coef_s = random_functional(rng, (8, 8))

    def loss():
        refined = F.refine(p, F.FeatureGrid(x, "coarse"))
        seg = F.segment(p, refined)
        return tape.tsum(refined.grid * coef_r) + tape.tsum(seg.grid * coef_s)

    check_grads(loss, {"x": x, **p})


def test_mask_pool_gradcheck_both_arguments():
    rng = np.random.default_rng(10)
    g = Tensor(rng.standard_normal((3, 3, 2)), requires_grad=True)
    m = Tensor(rng.uniform(0.1, 0.9, (3, 3)), requires_grad=True)
    coef = random_functional(rng, (3, 3, 2))

    def loss():
        return tape.tsum(F.mask_pool(F.FeatureGrid(g, "refined"),
                                     F.MaskGrid(m, "predicted")).grid * coef)

    check_grads(loss, {"g": g, "m": m})
