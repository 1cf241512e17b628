"""Run configuration: strict-JSON dataclasses with documented defaults.

Unknown keys are rejected at every nesting level so a config file snapshot
is always an exact, replayable description of a run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import SchemaViolation


@dataclass
class ModelConfig:
    patch_size: int = 8            # frozen encoder patch edge
    encoder_dim: int = 64          # frozen patch-embedding width
    encoder_seed: int = 7          # frozen weights reconstructible from this
    refined_channels: int = 32     # channels out of the upsampling stack
    seg_hidden: int = 16           # hidden channels of the mask head
    query_dim: int = 64            # query-token width (scene/projection/knowledge)
    n_query_tokens: int = 8        # rows of the scene / projection query sets
    n_knowledge_tokens: int = 8    # rows of the knowledge query set
    qformer_layers: int = 2
    qformer_heads: int = 4
    dec_dim: int = 64              # decoder embedding width
    dec_layers: int = 2
    dec_heads: int = 4
    max_caption_len: int = 32      # token budget per caption incl. <bos>/<eos>
    top_k: int = 9                 # names retrieved per sample
    null_semantic_context: bool = False  # replace retrieved names with the null name
    dtype: str = "float32"         # float32 normally, float64 for gradient checks

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise SchemaViolation(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.top_k < 1:
            raise SchemaViolation("top_k must be >= 1")


@dataclass
class TrainConfig:
    lr_init: float = 1e-4          # peak learning rate after warmup
    lr_warmup_start: float = 1e-6  # learning rate at step 0
    warmup_steps: int = 5000
    total_steps: int | None = None  # None -> one pass over the train split
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    freeze_decoder: bool = False
    teacher_force_mask: bool = False  # pool with the GT coverage mask instead of the predicted one
    pretrain_lr: float = 3e-3      # decoder-only language-model pretraining
    pretrain_epochs: int = 200

    def __post_init__(self):
        for name in ("lr_init", "lr_warmup_start", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise SchemaViolation(f"{name} must be > 0")
        if self.total_steps is not None and self.warmup_steps > self.total_steps:
            raise SchemaViolation(
                f"warmup_steps ({self.warmup_steps}) must not exceed total_steps ({self.total_steps})")
        if self.batch_size < 1:
            raise SchemaViolation("batch_size must be >= 1")


@dataclass
class SynthConfig:
    canvas: list = field(default_factory=lambda: [64, 64])       # [H, W]
    source_size: list = field(default_factory=lambda: [64, 64])  # [h, w]
    n_scenes: int = 4
    n_sources: int = 8
    draws_per_pair: int = 1        # blend draws per (scene, source)
    eval_fraction: float = 0.25
    captions_per_scene: int = 1
    captions_per_source: int = 1
    noise_sigma: float = 0.0       # post-blend Gaussian noise, projection region only
    gain_range: list = field(default_factory=lambda: [0.7, 1.4])
    gamma_range: list = field(default_factory=lambda: [0.8, 1.25])
    quad_scale_range: list = field(default_factory=lambda: [0.55, 0.8])  # quad side / canvas side
    corner_jitter: float = 0.04    # per-corner jitter as a fraction of canvas side
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eval_fraction < 1.0:
            raise SchemaViolation("eval_fraction must be in [0, 1)")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    seed: int = 0


_SECTION_TYPES = {"model": ModelConfig, "train": TrainConfig, "synth": SynthConfig}


def _dataclass_from_dict(cls, data, where):
    if not isinstance(data, dict):
        raise SchemaViolation(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise SchemaViolation(f"{where}: unknown key(s) {sorted(unknown)}")
    return cls(**data)


def run_config_from_dict(data, where="config"):
    if not isinstance(data, dict):
        raise SchemaViolation(f"{where}: expected an object")
    unknown = set(data) - set(_SECTION_TYPES) - {"seed"}
    if unknown:
        raise SchemaViolation(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for key, cls in _SECTION_TYPES.items():
        if key in data:
            kwargs[key] = _dataclass_from_dict(cls, data[key], f"{where}.{key}")
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise SchemaViolation(f"{where}.seed: expected an integer")
        kwargs["seed"] = data["seed"]
    return RunConfig(**kwargs)


def load_run_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as e:
        raise SchemaViolation(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise SchemaViolation(f"config file {path} is not valid JSON: {e}") from e
    return run_config_from_dict(data)


def config_snapshot(cfg: RunConfig) -> dict:
    """Plain-dict snapshot embedded in every artifact for provenance."""
    return dataclasses.asdict(cfg)
