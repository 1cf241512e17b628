"""Multi-task objective, optimizer, schedule, training loop, checkpoints.

The checkpoint is a single file: an 8-byte little-endian header length, a
UTF-8 JSON header (padded to 8-byte alignment) carrying the vocabulary, the
config snapshot, the step counter and a name -> {shape, dtype, byte_offset}
table, then a little-endian float32 payload with 8-byte-aligned entries.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import tape
from .config import ModelConfig, TrainConfig, _dataclass_from_dict
from .decoder import PAD, Vocabulary, tokenize
from .errors import (
    CheckpointLoadFailure,
    EmptyCorpus,
    NonFinite,
    NonFiniteLoss,
    SchemaViolation,
    ShapeMismatch,
    StepOutOfRange,
)
from .model import ProCapModel
from .tape import Tensor


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise SchemaViolation("loss weights must be >= 0")


@dataclass
class LossBreakdown:
    l_s: float
    l_p: float
    l_seg: float
    total: float

    @classmethod
    def build(cls, l_s, l_p, l_seg, w: LossWeights):
        vals = (float(l_s), float(l_p), float(l_seg))
        if not all(math.isfinite(v) for v in vals):
            raise NonFinite(f"loss components not finite: {vals}")
        total = w.alpha * vals[0] + w.beta * vals[1] + w.gamma * vals[2]
        return cls(vals[0], vals[1], vals[2], total)


def seg_loss(pred, target, eps=1e-7):
    """Mean binary cross-entropy between a soft prediction and soft target.

    Predictions are clamped to [eps, 1-eps] before the logs; returns a tape
    Tensor so the loss can drive backprop.
    """
    p = pred.grid if hasattr(pred, "grid") else pred
    t = target.grid if hasattr(target, "grid") else target
    if not isinstance(p, Tensor):
        p = Tensor(np.asarray(p))
    td = t.data if isinstance(t, Tensor) else np.asarray(t)
    if p.shape != td.shape:
        raise ShapeMismatch(f"pred {p.shape} vs target {td.shape}")
    td = td.astype(p.dtype)
    pc = tape.clip(p, eps, 1.0 - eps)
    one = Tensor(np.asarray(1.0, dtype=p.dtype))
    ll = tape.add(tape.mul(Tensor(td), tape.log(pc)),
                  tape.mul(Tensor(1.0 - td), tape.log(tape.sub(one, pc))))
    return tape.mean(tape.neg(ll))


def total_loss(l_s, l_p, l_seg, w: LossWeights) -> LossBreakdown:
    return LossBreakdown.build(l_s, l_p, l_seg, w)


def lr_schedule(step, cfg: TrainConfig):
    """Linear warmup to lr_init, then cosine decay to zero."""
    if cfg.total_steps is None:
        raise SchemaViolation("lr_schedule needs a resolved total_steps")
    if not 0 <= step <= cfg.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_warmup_start + (cfg.lr_init - cfg.lr_warmup_start) * (step / cfg.warmup_steps)
    denom = cfg.total_steps - cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / denom if denom > 0 else 0.0
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params, beta1=0.9, beta2=0.99, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            mh = self.m[k] / c1
            vh = self.v[k] / c2
            p.data = p.data - lr * (mh / (np.sqrt(vh) + self.eps) + self.weight_decay * p.data)


class _BatchSampler:
    """Deterministic stream of batch indices from chained seeded permutations."""

    def __init__(self, n, rng):
        self.n = n
        self.rng = rng
        self.queue = []

    def next(self, k):
        while len(self.queue) < k:
            self.queue.extend(self.rng.permutation(self.n).tolist())
        out, self.queue = self.queue[:k], self.queue[k:]
        return out


def train_model(model: ProCapModel, samples, scenes, sources, kb, tcfg: TrainConfig,
                weights: LossWeights | None = None, log_path=None, progress=None):
    """End-to-end training on the train split; returns the per-step log rows.

    Forward: encode -> refine -> segment -> mask pool (predicted or GT mask
    per config) -> query encoders -> retrieval (pure selection) -> knowledge
    encoder -> prompts -> two caption NLLs plus segmentation BCE. Non-finite
    losses abort.
    """
    weights = weights or LossWeights()
    train_samples = [s for s in samples if s.split == "train"]
    if not train_samples:
        raise EmptyCorpus("no training samples in the manifest")
    total = tcfg.total_steps
    if total is None:
        total = math.ceil(len(train_samples) / tcfg.batch_size)
    cfg = dataclasses.replace(tcfg, total_steps=total)
    if cfg.warmup_steps > cfg.total_steps:
        raise SchemaViolation(
            f"warmup_steps ({cfg.warmup_steps}) exceeds total_steps ({cfg.total_steps})")

    rng = np.random.default_rng(cfg.seed)
    sampler = _BatchSampler(len(train_samples), rng)
    trainables = {k: model.params[k] for k in model.trainable_names(cfg.freeze_decoder)}
    opt = AdamW(trainables, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    max_len = model.cfg.max_caption_len
    scene_caps = {sid: [tokenize(c, model.vocab, max_len).ids for c in sc.scene_captions]
                  for sid, sc in scenes.items()}
    source_caps = {sid: [tokenize(c, model.vocab, max_len).ids for c in so.source_captions]
                   for sid, so in sources.items()}

    rows = []
    for step in range(cfg.total_steps):
        idx = sampler.next(cfg.batch_size)
        batch = [train_samples[i] for i in idx]
        images = np.stack([s.composite_image for s in batch])
        gt_masks = [s.gt_mask_pixel for s in batch]
        scene_ids = [scene_caps[s.scene_id][rng.integers(len(scene_caps[s.scene_id]))]
                     for s in batch]
        proj_ids = [source_caps[s.source_id][rng.integers(len(source_caps[s.source_id]))]
                    for s in batch]

        for p in trainables.values():
            p.zero_grad()
        fwd = model.forward_batch(images, gt_masks, kb, cfg.teacher_force_mask)
        l_s = model.caption_nll(fwd["prompt_scene"], _pad_batch(scene_ids))
        l_p = model.caption_nll(fwd["prompt_proj"], _pad_batch(proj_ids))
        l_seg = seg_loss(fwd["pred_mask"], fwd["target_mask"])
        breakdown = total_loss(float(l_s.data), float(l_p.data), float(l_seg.data), weights)
        if not math.isfinite(breakdown.total):
            raise NonFiniteLoss(f"step {step}: {breakdown}")

        graph_total = l_s * weights.alpha + l_p * weights.beta + l_seg * weights.gamma
        graph_total.backward()
        lr = lr_schedule(step, cfg)
        opt.step(lr)
        rows.append((step, lr, breakdown))
        if progress and (step % progress == 0 or step == cfg.total_steps - 1):
            print(f"step {step:5d}  lr {lr:.3e}  l_s {breakdown.l_s:.4f}  "
                  f"l_p {breakdown.l_p:.4f}  l_seg {breakdown.l_seg:.4f}  "
                  f"total {breakdown.total:.4f}", flush=True)

    if log_path is not None:
        write_loss_log(log_path, rows)
    return rows


def _pad_batch(id_lists):
    tmax = max(len(ids) for ids in id_lists)
    out = np.full((len(id_lists), tmax), PAD, dtype=np.int64)
    for r, ids in enumerate(id_lists):
        out[r, :len(ids)] = ids
    return out


def write_loss_log(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,lr,l_s,l_p,l_seg,total\n")
        for step, lr, b in rows:
            fh.write(f"{step},{lr!r},{b.l_s!r},{b.l_p!r},{b.l_seg!r},{b.total!r}\n")


def read_loss_log(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        assert header == ["step", "lr", "l_s", "l_p", "l_seg", "total"]
        for line in fh:
            step, lr, l_s, l_p, l_seg, total = line.strip().split(",")
            rows.append((int(step), float(lr),
                         LossBreakdown(float(l_s), float(l_p), float(l_seg), float(total))))
    return rows


# ---------------------------------------------------------------------------
# checkpoint I/O

CKPT_FORMAT = 1


def save_checkpoint(path, model: ProCapModel, step=0, run_snapshot=None):
    names = sorted(model.params)
    table = {}
    offset = 0
    for name in names:
        arr = model.params[name].data
        nbytes = int(np.prod(arr.shape)) * 4 if arr.shape else 4
        table[name] = {"shape": list(arr.shape), "dtype": "f4", "byte_offset": offset}
        offset += nbytes
        offset = (offset + 7) // 8 * 8
    payload = bytearray(offset)
    for name in names:
        meta = table[name]
        raw = np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes()
        payload[meta["byte_offset"]:meta["byte_offset"] + len(raw)] = raw
    header = {
        "format": CKPT_FORMAT,
        "step": int(step),
        "model_config": dataclasses.asdict(model.cfg),
        "vocab": list(model.vocab.tokens),
        "run_config": run_snapshot,
        "params": table,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    pad = (-len(hbytes)) % 8
    hbytes += b" " * pad
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Returns (model, step, run_snapshot); every array checks its header shape."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointLoadFailure(f"cannot read {path}: {e}") from e
    if len(blob) < 8:
        raise CheckpointLoadFailure(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", blob[:8])
    if 8 + hlen > len(blob):
        raise CheckpointLoadFailure(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointLoadFailure(f"{path}: bad header: {e}") from e
    for key in ("format", "step", "model_config", "vocab", "params", "payload_bytes"):
        if key not in header:
            raise CheckpointLoadFailure(f"{path}: header missing {key!r}")
    payload = blob[8 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise ShapeMismatch(
            f"payload is {len(payload)} bytes, header promises {header['payload_bytes']}")

    mcfg = _dataclass_from_dict(ModelConfig, header["model_config"], "checkpoint.model_config")
    vocab = Vocabulary(header["vocab"])
    reference = ProCapModel(mcfg, vocab, seed=0)
    want = {k: tuple(v.data.shape) for k, v in reference.params.items()}
    got = {k: tuple(v["shape"]) for k, v in header["params"].items()}
    if want != got:
        missing = set(want) - set(got)
        extra = set(got) - set(want)
        bad = {k for k in want.keys() & got.keys() if want[k] != got[k]}
        raise ShapeMismatch(f"param table mismatch: missing={sorted(missing)} "
                            f"extra={sorted(extra)} shape={sorted(bad)}")
    dtype = np.dtype(mcfg.dtype)
    params = {}
    for name, meta in header["params"].items():
        n = int(np.prod(meta["shape"])) if meta["shape"] else 1
        off = meta["byte_offset"]
        if meta["dtype"] != "f4":
            raise ShapeMismatch(f"{name}: unsupported dtype {meta['dtype']!r}")
        if off + n * 4 > len(payload):
            raise ShapeMismatch(f"{name}: byte range exceeds payload")
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(meta["shape"])
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    model = ProCapModel(mcfg, vocab, params=params)
    return model, int(header["step"]), header.get("run_config")
