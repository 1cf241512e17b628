"""Synthetic projector-camera composites.

A composite frame is the physical scene plus projector light reflecting off
it: additive, modulated by scene albedo, geometrically warped by a planar
homography, photometrically shaped by per-channel gain and a gamma curve.
The ground-truth mask is the full warped projector quad, not per-object
silhouettes.

Pixel centers sit at integer coordinates (x=column, y=row); the projector
source occupies [0, w-1] x [0, h-1] in its own frame, and the homography
maps projector coordinates to camera coordinates.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .config import SynthConfig
from .errors import (
    DimensionMismatch,
    EmptyCorpus,
    IoFailure,
    MaskNotBinary,
    MissingFile,
    NonInvertibleHomography,
    SchemaViolation,
)

MANIFEST_VERSION = 1


@dataclass
class SceneSpec:
    scene_id: str
    scene_image: np.ndarray          # (H, W, 3) in [0, 1]
    scene_captions: list

    def validate(self, canvas=None):
        if not self.scene_captions:
            raise SchemaViolation(f"scene {self.scene_id!r}: empty caption list")
        if self.scene_image.ndim != 3 or self.scene_image.shape[2] != 3:
            raise DimensionMismatch(f"scene {self.scene_id!r}: expected HxWx3 image")
        if canvas is not None and tuple(self.scene_image.shape[:2]) != tuple(canvas):
            raise SchemaViolation(
                f"scene {self.scene_id!r}: image is {self.scene_image.shape[:2]}, canvas is {tuple(canvas)}")


@dataclass
class ProjectionSpec:
    source_id: str
    source_image: np.ndarray         # (h, w, 3) in [0, 1]
    source_captions: list
    object_name: str

    def validate(self):
        if not self.source_captions:
            raise SchemaViolation(f"source {self.source_id!r}: empty caption list")
        if not self.object_name:
            raise SchemaViolation(f"source {self.source_id!r}: empty object name")
        if self.source_image.ndim != 3 or self.source_image.shape[2] != 3:
            raise DimensionMismatch(f"source {self.source_id!r}: expected hxwx3 image")


@dataclass
class BlendParams:
    homography: np.ndarray           # (3, 3), projector frame -> camera frame
    gain: np.ndarray                 # (3,) per-channel projector intensity >= 0
    projector_gamma: float
    noise_sigma: float = 0.0

    def validate(self):
        H = np.asarray(self.homography, dtype=np.float64)
        if H.shape != (3, 3):
            raise DimensionMismatch("homography must be 3x3")
        if abs(np.linalg.det(H)) <= 1e-9:
            raise NonInvertibleHomography(f"|det| = {abs(np.linalg.det(H)):.3e}")
        g = np.asarray(self.gain, dtype=np.float64)
        if g.shape != (3,) or not np.all(np.isfinite(g)) or np.any(g < 0):
            raise SchemaViolation("gain must be three finite values >= 0")
        if self.projector_gamma <= 0:
            raise SchemaViolation("projector_gamma must be > 0")
        if self.noise_sigma < 0:
            raise SchemaViolation("noise_sigma must be >= 0")


@dataclass
class SarSample:
    sample_id: str
    scene_id: str
    source_id: str
    composite_image: np.ndarray      # (H, W, 3) in [0, 1]
    gt_mask_pixel: np.ndarray        # (H, W) in {0, 1}
    blend: BlendParams
    split: str = "train"


def apply_homography(H, xy):
    """Map (N, 2) points through H; returns (N, 2). Degenerate rows -> nan."""
    pts = np.concatenate([xy, np.ones((len(xy), 1))], axis=1)
    out = pts @ np.asarray(H, dtype=np.float64).T
    w = out[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = out[:, :2] / w[:, None]
    uv[np.abs(w) < 1e-12] = np.nan
    return uv


def homography_from_corners(src, dst):
    """Direct linear transform from four (x, y) correspondences."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    A = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i] = u
        rhs[2 * i + 1] = v
    try:
        h = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as e:
        raise NonInvertibleHomography(f"degenerate correspondences: {e}") from e
    return np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])


def _bilinear(img, u, v):
    """Sample img (h, w, C) at float coords; caller guarantees in-bounds."""
    h, w = img.shape[:2]
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    du = (u - u0)[..., None]
    dv = (v - v0)[..., None]
    tl = img[v0, u0]
    tr = img[v0, u0 + 1]
    bl = img[v0 + 1, u0]
    br = img[v0 + 1, u0 + 1]
    return (tl * (1 - du) * (1 - dv) + tr * du * (1 - dv)
            + bl * (1 - du) * dv + br * du * dv)


def compose(scene: SceneSpec, proj: ProjectionSpec, blend: BlendParams,
            rng: np.random.Generator | None = None, sample_id: str = "",
            split: str = "train") -> SarSample:
    """Blend a projection source onto a scene.

    Inside the warped quad:  clamp(S + gain * S * W(P^gamma), 0, 1),
    where W is the bilinear pullback through the inverse homography.
    Outside the quad the composite equals the scene exactly. Gaussian noise
    (sigma > 0) perturbs the projection region only, then reclamps, so the
    outside-mask identity is preserved bit for bit.
    """
    scene.validate()
    proj.validate()
    blend.validate()
    S = scene.scene_image
    H_img, W_img = S.shape[:2]
    h, w = proj.source_image.shape[:2]

    Hmat = np.asarray(blend.homography, dtype=np.float64)
    Hinv = np.linalg.inv(Hmat)

    ys, xs = np.mgrid[0:H_img, 0:W_img]
    uv = apply_homography(Hinv, np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64))
    u = uv[:, 0].reshape(H_img, W_img)
    v = uv[:, 1].reshape(H_img, W_img)
    with np.errstate(invalid="ignore"):
        inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    mask = inside.astype(np.float64)

    curved = np.power(proj.source_image.astype(np.float64), blend.projector_gamma)
    proj_light = np.zeros_like(S, dtype=np.float64)
    if inside.any():
        proj_light[inside] = _bilinear(curved, u[inside], v[inside])

    gain = np.asarray(blend.gain, dtype=np.float64)
    blended = S + gain[None, None, :] * S * proj_light
    if blend.noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        blended = blended + blend.noise_sigma * rng.standard_normal(blended.shape) * mask[..., None]
    blended = np.clip(blended, 0.0, 1.0)
    composite = np.where(mask[..., None] > 0, blended, S)
    return SarSample(sample_id or f"{scene.scene_id}__{proj.source_id}",
                     scene.scene_id, proj.source_id, composite, mask, blend, split)


# ---------------------------------------------------------------------------
# procedural content: deterministic test-card scenes and projector sources

PALETTE = [
    ("red", (0.80, 0.16, 0.16)),
    ("green", (0.20, 0.70, 0.25)),
    ("blue", (0.18, 0.30, 0.80)),
    ("gray", (0.55, 0.55, 0.55)),
    ("teal", (0.10, 0.62, 0.62)),
    ("violet", (0.55, 0.25, 0.70)),
]

# projector-content colors: saturated, one per default source, never the
# background gray so every shape stays visible against its own field
SOURCE_COLORS = [
    ("red", (0.90, 0.12, 0.12)),
    ("green", (0.12, 0.80, 0.20)),
    ("blue", (0.15, 0.25, 0.90)),
    ("yellow", (0.90, 0.85, 0.10)),
    ("teal", (0.08, 0.75, 0.75)),
    ("violet", (0.65, 0.20, 0.85)),
    ("orange", (0.95, 0.55, 0.10)),
    ("pink", (0.95, 0.35, 0.60)),
]

PATTERNS = ["checker", "stripes", "gradient", "dots"]
SHAPES = ["disk", "ring", "cross", "bars", "square", "triangle", "diamond", "star"]

_SCENE_TEMPLATES = [
    "a {color} {pattern} surface",
    "a surface with a {color} {pattern} texture",
]
_SOURCE_TEMPLATES = [
    "a {color} {shape} on a gray background",
    "a gray background with a {color} {shape}",
]

# sources sit on a mid-gray field, not black: projector content with light
# everywhere keeps the full addressable quad observable in the composite
SOURCE_BG = 0.50


def _pattern_image(pattern, color, H, W):
    c = np.array(color)
    ys, xs = np.mgrid[0:H, 0:W]
    img = np.zeros((H, W, 3))
    if pattern == "checker":
        cells = ((xs // 8 + ys // 8) % 2).astype(np.float64)
        img = (0.22 + 0.33 * cells)[..., None] * c
    elif pattern == "stripes":
        bands = ((ys // 6) % 2).astype(np.float64)
        img = (0.20 + 0.31 * bands)[..., None] * c
    elif pattern == "gradient":
        ramp = 0.15 + 0.42 * xs / max(W - 1, 1)
        img = ramp[..., None] * c
    elif pattern == "dots":
        cx = (xs % 12) - 6
        cy = (ys % 12) - 6
        disk = (cx * cx + cy * cy <= 12).astype(np.float64)
        img = (0.18 + 0.37 * disk)[..., None] * c
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    return np.clip(img + 0.06, 0.0, 1.0)


def _shape_image(shape, color, h, w):
    c = np.array(color)
    ys, xs = np.mgrid[0:h, 0:w]
    x = (xs - (w - 1) / 2) / (w / 2)
    y = (ys - (h - 1) / 2) / (h / 2)
    r = np.sqrt(x * x + y * y)
    if shape == "disk":
        m = r <= 0.62
    elif shape == "ring":
        m = (r <= 0.68) & (r >= 0.38)
    elif shape == "cross":
        m = (np.abs(x) <= 0.18) | (np.abs(y) <= 0.18)
    elif shape == "bars":
        m = (np.abs(x + 0.5) <= 0.10) | (np.abs(x) <= 0.10) | (np.abs(x - 0.5) <= 0.10)
    elif shape == "square":
        m = (np.abs(x) <= 0.55) & (np.abs(y) <= 0.55)
    elif shape == "triangle":
        m = (y <= 0.58) & (np.abs(x) <= (y + 0.62) / 2.0)
    elif shape == "diamond":
        m = np.abs(x) + np.abs(y) <= 0.72
    elif shape == "star":
        m = np.sqrt(np.abs(x)) + np.sqrt(np.abs(y)) <= 1.0
    else:
        raise ValueError(f"unknown shape {shape!r}")
    img = np.full((h, w, 3), SOURCE_BG)
    img[m] = c
    return img


def build_scene_specs(cfg: SynthConfig):
    H, W = cfg.canvas
    specs = []
    for i in range(cfg.n_scenes):
        color_name, color = PALETTE[i % len(PALETTE)]
        pattern = PATTERNS[(i // len(PALETTE) + i) % len(PATTERNS)]
        captions = [_SCENE_TEMPLATES[k % len(_SCENE_TEMPLATES)].format(color=color_name, pattern=pattern)
                    for k in range(cfg.captions_per_scene)]
        img = _quantize_roundtrip(_pattern_image(pattern, color, H, W))
        specs.append(SceneSpec(f"scene{i:02d}", img, captions))
    return specs


def build_source_specs(cfg: SynthConfig):
    h, w = cfg.source_size
    specs = []
    for i in range(cfg.n_sources):
        shape = SHAPES[i % len(SHAPES)]
        color_name, color = SOURCE_COLORS[(i + i // len(SHAPES)) % len(SOURCE_COLORS)]
        captions = [_SOURCE_TEMPLATES[k % len(_SOURCE_TEMPLATES)].format(color=color_name, shape=shape)
                    for k in range(cfg.captions_per_source)]
        img = _quantize_roundtrip(_shape_image(shape, color, h, w))
        specs.append(ProjectionSpec(f"source{i:02d}", img, captions, shape))
    return specs


def draw_blend(cfg: SynthConfig, rng: np.random.Generator, canvas, source_size) -> BlendParams:
    """Random blend: a jittered convex target quad plus photometric draws."""
    H, W = canvas
    h, w = source_size
    side = min(H, W)
    for _ in range(64):
        scale = rng.uniform(*cfg.quad_scale_range)
        half = 0.5 * scale * side
        cx = rng.uniform(half + 1, W - 1 - half - 1)
        cy = rng.uniform(half + 1, H - 1 - half - 1)
        base = np.array([[cx - half, cy - half], [cx + half, cy - half],
                         [cx + half, cy + half], [cx - half, cy + half]])
        quad = base + rng.uniform(-cfg.corner_jitter * side, cfg.corner_jitter * side, size=(4, 2))
        if _is_convex(quad):
            break
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    Hmat = homography_from_corners(src, quad)
    gain = rng.uniform(*cfg.gain_range, size=3)
    gamma = rng.uniform(*cfg.gamma_range)
    return BlendParams(Hmat, gain, float(gamma), float(cfg.noise_sigma))


def _is_convex(quad):
    crosses = []
    for i in range(4):
        a = quad[(i + 1) % 4] - quad[i]
        b = quad[(i + 2) % 4] - quad[(i + 1) % 4]
        crosses.append(a[0] * b[1] - a[1] * b[0])
    crosses = np.array(crosses)
    return bool(np.all(crosses > 1.0) or np.all(crosses < -1.0))


# ---------------------------------------------------------------------------
# image and manifest I/O

def _quantize_roundtrip(img):
    """Snap a float image to the exact values an 8-bit PNG roundtrip yields."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8) / np.float64(255.0)


def save_png(path, img):
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_mask_png(path, mask):
    arr = (np.asarray(mask) > 0.5).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path)


def load_png(path):
    if not os.path.exists(path):
        raise MissingFile(path)
    arr = np.asarray(Image.open(path))
    return arr.astype(np.float64) / 255.0


def load_mask_png(path):
    if not os.path.exists(path):
        raise MissingFile(path)
    arr = np.asarray(Image.open(path))
    vals = np.unique(arr)
    if not np.all(np.isin(vals, [0, 255])):
        raise MaskNotBinary(f"{path}: values {vals[:8].tolist()} outside {{0, 255}}")
    return (arr == 255).astype(np.float64)


def synth_dataset(cfg: SynthConfig, out_dir, seed=None, extra_config_snapshot=None):
    """Generate the corpus, write PNGs and manifest.json, return the manifest dict."""
    if cfg.n_scenes < 1 or cfg.n_sources < 1:
        raise EmptyCorpus("need at least one scene and one source")
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)

    scenes = build_scene_specs(cfg)
    sources = build_source_specs(cfg)

    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create output directory {out_dir}: {e}") from e

    def rel(*parts):
        return "/".join(("images",) + parts)

    manifest = {
        "version": MANIFEST_VERSION,
        "canvas": list(cfg.canvas),
        "scenes": [],
        "sources": [],
        "samples": [],
        "config": {"seed": seed, "synth": dataclasses.asdict(cfg),
                   **(extra_config_snapshot or {})},
    }

    for sc in scenes:
        p = rel(f"{sc.scene_id}.png")
        save_png(os.path.join(out_dir, p), sc.scene_image)
        manifest["scenes"].append({"id": sc.scene_id, "image": p, "captions": list(sc.scene_captions)})
    for so in sources:
        p = rel(f"{so.source_id}.png")
        save_png(os.path.join(out_dir, p), so.source_image)
        manifest["sources"].append({"id": so.source_id, "image": p,
                                    "captions": list(so.source_captions), "name": so.object_name})

    records = []
    for sc in scenes:
        for so in sources:
            for d in range(cfg.draws_per_pair):
                blend = draw_blend(cfg, rng, cfg.canvas, cfg.source_size)
                sid = f"{sc.scene_id}__{so.source_id}__{d:02d}"
                sample = compose(sc, so, blend, rng=rng, sample_id=sid)
                records.append((sid, sc, so, blend, sample))

    n_eval = int(math.floor(cfg.eval_fraction * len(records) + 0.5))
    order = rng.permutation(len(records))
    eval_idx = set(order[:n_eval].tolist())

    for i, (sid, sc, so, blend, sample) in enumerate(records):
        comp_path = rel(f"{sid}__composite.png")
        mask_path = rel(f"{sid}__mask.png")
        save_png(os.path.join(out_dir, comp_path), sample.composite_image)
        save_mask_png(os.path.join(out_dir, mask_path), sample.gt_mask_pixel)
        manifest["samples"].append({
            "id": sid,
            "scene_id": sc.scene_id,
            "source_id": so.source_id,
            "composite": comp_path,
            "mask": mask_path,
            "homography": [float(x) for x in np.asarray(blend.homography).ravel()],
            "gain": [float(x) for x in np.asarray(blend.gain)],
            "gamma": float(blend.projector_gamma),
            "noise_sigma": float(blend.noise_sigma),
            "split": "eval" if i in eval_idx else "train",
        })

    manifest_path = os.path.join(out_dir, "manifest.json")
    try:
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1)
            fh.write("\n")
    except OSError as e:
        raise IoFailure(f"cannot write manifest {manifest_path}: {e}") from e
    return manifest


_SAMPLE_KEYS = {"id", "scene_id", "source_id", "composite", "mask",
                "homography", "gain", "gamma", "noise_sigma", "split"}


def load_dataset(manifest_path):
    """Load and validate a manifest; returns (samples, scenes, sources).

    scenes and sources are dicts keyed by id. Every invariant the types
    declare is checked here: binary masks, outside-mask identity, the mask
    being exactly the warped-quad rasterization, non-empty captions.
    """
    if not os.path.exists(manifest_path):
        raise MissingFile(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            man = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaViolation(f"{manifest_path}: invalid JSON: {e}") from e

    required = {"version", "canvas", "scenes", "sources", "samples"}
    missing = required - set(man)
    if missing:
        raise SchemaViolation(f"manifest missing key(s) {sorted(missing)}")
    unknown = set(man) - required - {"config"}
    if unknown:
        raise SchemaViolation(f"manifest has unknown key(s) {sorted(unknown)}")
    canvas = tuple(man["canvas"])
    base = os.path.dirname(os.path.abspath(manifest_path))

    scenes = {}
    for entry in man["scenes"]:
        for k in ("id", "image", "captions"):
            if k not in entry:
                raise SchemaViolation(f"scene entry missing {k!r}: {entry}")
        if entry["id"] in scenes:
            raise SchemaViolation(f"duplicate scene id {entry['id']!r}")
        if not entry["captions"]:
            raise SchemaViolation(f"scene {entry['id']!r}: empty caption list")
        img = load_png(os.path.join(base, entry["image"]))
        spec = SceneSpec(entry["id"], img, list(entry["captions"]))
        spec.validate(canvas)
        scenes[spec.scene_id] = spec

    sources = {}
    for entry in man["sources"]:
        for k in ("id", "image", "captions", "name"):
            if k not in entry:
                raise SchemaViolation(f"source entry missing {k!r}: {entry}")
        if entry["id"] in sources:
            raise SchemaViolation(f"duplicate source id {entry['id']!r}")
        if not entry["captions"]:
            raise SchemaViolation(f"source {entry['id']!r}: empty caption list")
        img = load_png(os.path.join(base, entry["image"]))
        spec = ProjectionSpec(entry["id"], img, list(entry["captions"]), entry["name"])
        spec.validate()
        sources[spec.source_id] = spec

    samples = []
    for entry in man["samples"]:
        missing = _SAMPLE_KEYS - set(entry)
        if missing:
            raise SchemaViolation(f"sample entry missing {sorted(missing)}: {entry.get('id', '?')}")
        sid = entry["id"]
        if entry["scene_id"] not in scenes:
            raise SchemaViolation(f"sample {sid!r}: unknown scene_id {entry['scene_id']!r}")
        if entry["source_id"] not in sources:
            raise SchemaViolation(f"sample {sid!r}: unknown source_id {entry['source_id']!r}")
        if entry["split"] not in ("train", "eval"):
            raise SchemaViolation(f"sample {sid!r}: split must be train or eval")
        hom = np.asarray(entry["homography"], dtype=np.float64)
        if hom.shape != (9,):
            raise SchemaViolation(f"sample {sid!r}: homography must have 9 entries")
        blend = BlendParams(hom.reshape(3, 3), np.asarray(entry["gain"], dtype=np.float64),
                            float(entry["gamma"]), float(entry["noise_sigma"]))
        blend.validate()
        composite = load_png(os.path.join(base, entry["composite"]))
        mask = load_mask_png(os.path.join(base, entry["mask"]))
        if composite.shape[:2] != canvas or mask.shape != canvas:
            raise DimensionMismatch(f"sample {sid!r}: image dims do not match canvas {canvas}")

        scene_img = scenes[entry["scene_id"]].scene_image
        outside = mask == 0
        if not np.array_equal(composite[outside], scene_img[outside]):
            raise SchemaViolation(f"sample {sid!r}: composite differs from scene outside the mask")
        expected_mask = rasterize_quad_mask(blend.homography, canvas,
                                            sources[entry["source_id"]].source_image.shape[:2])
        if not np.array_equal(mask, expected_mask):
            raise SchemaViolation(f"sample {sid!r}: mask is not the warped-quad rasterization")

        samples.append(SarSample(sid, entry["scene_id"], entry["source_id"],
                                 composite, mask, blend, entry["split"]))
    return samples, scenes, sources


def rasterize_quad_mask(homography, canvas, source_size):
    """Mask rule used by compose: pixel centers whose inverse warp lands in the source."""
    H_img, W_img = canvas
    h, w = source_size
    Hinv = np.linalg.inv(np.asarray(homography, dtype=np.float64))
    ys, xs = np.mgrid[0:H_img, 0:W_img]
    uv = apply_homography(Hinv, np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64))
    u = uv[:, 0].reshape(H_img, W_img)
    v = uv[:, 1].reshape(H_img, W_img)
    with np.errstate(invalid="ignore"):
        inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    return inside.astype(np.float64)
