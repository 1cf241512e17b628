"""Composition module: blend formula, mask geometry, synthesis, manifest IO."""

import json
import os

import numpy as np
import pytest
from PIL import Image

from procap import compose as C
from procap.config import SynthConfig
from procap.errors import (
    EmptyCorpus,
    MaskNotBinary,
    NonInvertibleHomography,
    SchemaViolation,
)

from oracles import quad_mask_oracle, warp_corners


def _scene(seed=0, H=64, W=64):
    rng = np.random.default_rng(seed)
    img = C._quantize_roundtrip(rng.uniform(0.1, 0.9, size=(H, W, 3)))
    return C.SceneSpec("scene00", img, ["a gray checker surface"])


def _source(img, name="disk"):
    return C.ProjectionSpec("source00", img, [f"a red {name} on a black background"], name)


def _random_blend(seed, cfg=None):
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    return C.draw_blend(cfg, rng, cfg.canvas, cfg.source_size)


def test_black_source_composite_equals_scene():
    scene = _scene()
    src = _source(np.zeros((64, 64, 3)))
    blend = _random_blend(3)
    sample = C.compose(scene, src, blend)
    assert np.array_equal(sample.composite_image, scene.scene_image)
    assert sample.gt_mask_pixel.max() == 1.0  # quad rasterized regardless


def test_identity_homography_white_source_doubles_scene():
    scene = _scene(1)
    src = _source(np.ones((64, 64, 3)))
    blend = C.BlendParams(np.eye(3), np.ones(3), 1.0, 0.0)
    sample = C.compose(scene, src, blend)
    assert np.all(sample.gt_mask_pixel == 1.0)
    # expected value evaluated from the stated formula, per pixel
    expected = np.minimum(2.0 * scene.scene_image, 1.0)
    assert np.allclose(sample.composite_image, expected, atol=1e-12)


def test_outside_mask_identity_with_noise():
    scene = _scene(2)
    src = _source(np.full((64, 64, 3), 0.7))
    blend = _random_blend(5)
    blend = C.BlendParams(blend.homography, blend.gain, blend.projector_gamma, 0.05)
    sample = C.compose(scene, src, blend, rng=np.random.default_rng(9))
    outside = sample.gt_mask_pixel == 0
    assert outside.any() and (~outside).any()
    diff = np.abs(sample.composite_image - scene.scene_image)[outside]
    assert diff.max() == 0.0
    # noise actually perturbed the projection region
    assert np.abs(sample.composite_image - scene.scene_image)[~outside].max() > 0


@pytest.mark.parametrize("seed", [11, 12, 13, 14])
def test_mask_matches_point_in_polygon_oracle(seed):
    scene = _scene(seed)
    src = _source(np.full((64, 64, 3), 0.5))
    blend = _random_blend(seed)
    sample = C.compose(scene, src, blend)
    inside, dist = quad_mask_oracle(blend.homography, (64, 64), (64, 64))
    safe = dist > 1.0
    assert np.array_equal(sample.gt_mask_pixel[safe] == 1.0, inside[safe])


def test_monotone_gain_inside_mask():
    scene = _scene(4)
    src = _source(np.clip(np.random.default_rng(4).uniform(0, 1, (64, 64, 3)), 0, 1))
    blend = _random_blend(21)
    base = C.BlendParams(blend.homography, np.array([0.4, 0.7, 1.0]), 1.0, 0.0)
    lo = C.compose(scene, src, base)
    for ch in range(3):
        g = base.gain.copy()
        g[ch] += 0.5
        hi = C.compose(scene, src, C.BlendParams(base.homography, g, 1.0, 0.0))
        assert np.all(hi.composite_image >= lo.composite_image - 1e-15)


def test_non_invertible_homography_rejected():
    scene = _scene()
    src = _source(np.ones((64, 64, 3)))
    H = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]])
    with pytest.raises(NonInvertibleHomography):
        C.compose(scene, src, C.BlendParams(H, np.ones(3), 1.0, 0.0))


def test_synth_sample_count_and_split(tmp_path):
    cfg = SynthConfig(n_scenes=4, n_sources=8, draws_per_pair=1, seed=0)
    man = C.synth_dataset(cfg, tmp_path)
    assert len(man["samples"]) == 32
    splits = {s["split"] for s in man["samples"]}
    assert splits == {"train", "eval"}
    assert sum(s["split"] == "eval" for s in man["samples"]) == 8


def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def test_synth_determinism_and_seed_sensitivity(tmp_path):
    cfg = SynthConfig(n_scenes=2, n_sources=3, seed=7)
    C.synth_dataset(cfg, tmp_path / "a")
    C.synth_dataset(cfg, tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    man_a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    C.synth_dataset(SynthConfig(n_scenes=2, n_sources=3, seed=8), tmp_path / "c")
    man_c = json.loads((tmp_path / "c" / "manifest.json").read_text())
    pa = [(s["homography"], s["gain"], s["gamma"]) for s in man_a["samples"]]
    pc = [(s["homography"], s["gain"], s["gamma"]) for s in man_c["samples"]]
    assert pa != pc


def test_load_roundtrip(tmp_path):
    cfg = SynthConfig(n_scenes=2, n_sources=2, seed=3)
    man = C.synth_dataset(cfg, tmp_path)
    samples, scenes, sources = C.load_dataset(tmp_path / "manifest.json")
    assert len(samples) == len(man["samples"])
    assert set(scenes) == {"scene00", "scene01"}
    assert set(sources) == {"source00", "source01"}
    for s in samples:
        assert s.split in ("train", "eval")
        assert set(np.unique(s.gt_mask_pixel)) <= {0.0, 1.0}


def test_load_rejects_empty_captions(tmp_path):
    C.synth_dataset(SynthConfig(n_scenes=1, n_sources=1, seed=0), tmp_path)
    mpath = tmp_path / "manifest.json"
    man = json.loads(mpath.read_text())
    man["scenes"][0]["captions"] = []
    mpath.write_text(json.dumps(man))
    with pytest.raises(SchemaViolation, match="scene00"):
        C.load_dataset(mpath)


def test_load_rejects_non_binary_mask(tmp_path):
    C.synth_dataset(SynthConfig(n_scenes=1, n_sources=1, seed=0), tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    mask_rel = man["samples"][0]["mask"]
    arr = np.asarray(Image.open(tmp_path / mask_rel)).copy()
    arr[5, 5] = 94  # 0.37 in 8-bit
    Image.fromarray(arr, mode="L").save(tmp_path / mask_rel)
    with pytest.raises(MaskNotBinary):
        C.load_dataset(tmp_path / "manifest.json")


def test_empty_corpus_rejected(tmp_path):
    with pytest.raises(EmptyCorpus):
        C.synth_dataset(SynthConfig(n_scenes=0, n_sources=2), tmp_path)


def test_warped_corner_geometry_consistency():
    # the forward-warped source corners land exactly where the blend put them
    cfg = SynthConfig()
    rng = np.random.default_rng(17)
    blend = C.draw_blend(cfg, rng, cfg.canvas, cfg.source_size)
    corners = warp_corners(blend.homography, cfg.source_size)
    assert np.all(corners > -10) and np.all(corners < 74)
