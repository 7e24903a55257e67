"""Defaults table and structured-text (YAML) config loading.

Every published constant of the method lives in ``PUBLISHED_DEFAULTS`` exactly
once; everything else that has a default but no published value is in
``TOY_DEFAULTS``.  Config files may override any key of the sections below.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

PUBLISHED_DEFAULTS = {
    "sampler_steps": 30,
    "cfg_scale": 1.5,
    "num_views": 21,
    "sequence_length": 12,
    "num_references": 10,
    "num_backgrounds": 100,
    "learning_rate": 1e-5,
}

TOY_DEFAULTS = {
    "num_train_timesteps": 1000,
    "beta_start": 8.5e-4,
    "beta_end": 1.2e-2,
    # 1e-5 is tuned for a pretrained backbone; toy models start from scratch
    "lr_scale": 10.0,
    "cond_dropout": 0.1,
    "pose_sigma": 0.02,
    "azimuth_arc": math.radians(60.0),
    "scale_jitter": 0.15,
    "image_size": 32,
    "codec_factor": 2,
    "codec_seed": 1234,
    "max_frames": 24,
}

# Azimuth of the frontal view; kept away from the 0/2pi seam so the default arc never wraps.
FRONTAL_AZIMUTH = math.pi


@dataclass(frozen=True)
class GuidanceConfig:
    cfg_scale: float = PUBLISHED_DEFAULTS["cfg_scale"]
    sampler_steps: int = PUBLISHED_DEFAULTS["sampler_steps"]

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ConfigError("cfg_scale must be nonnegative")
        if self.sampler_steps < 1:
            raise ConfigError("sampler_steps must be positive")


@dataclass(frozen=True)
class ScheduleConfig:
    num_train_timesteps: int = TOY_DEFAULTS["num_train_timesteps"]
    beta_start: float = TOY_DEFAULTS["beta_start"]
    beta_end: float = TOY_DEFAULTS["beta_end"]


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the denoiser and its conditioning branches."""

    in_channels: int = 12
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    blocks_per_level: int = 1
    heads: int = 4
    embed_dim: int = 96
    latent_size: int = 16
    max_frames: int = TOY_DEFAULTS["max_frames"]
    # "latent" (default) or "pixel" for the condition-branch ablation
    cond_space: str = "latent"
    image_channels: int = 3
    codec_factor: int = TOY_DEFAULTS["codec_factor"]

    def __post_init__(self):
        if self.embed_dim % 6:
            raise ConfigError(f"embed_dim={self.embed_dim} must be divisible by 6")
        for mult in self.channel_mults:
            if (self.base_channels * mult) % self.heads:
                raise ConfigError(
                    f"attention width {self.base_channels * mult} not divisible by heads={self.heads}"
                )
        if self.cond_space not in ("latent", "pixel"):
            raise ConfigError(f"cond_space must be 'latent' or 'pixel', got {self.cond_space!r}")
        if self.latent_size % (2 ** (len(self.channel_mults) - 1)):
            raise ConfigError("latent_size must be divisible by the total downsampling factor")


@dataclass(frozen=True)
class DataConfig:
    identities: int = 8
    views: int = PUBLISHED_DEFAULTS["num_views"]
    references: int = PUBLISHED_DEFAULTS["num_references"]
    backgrounds: int = PUBLISHED_DEFAULTS["num_backgrounds"]
    image_size: int = TOY_DEFAULTS["image_size"]
    azimuth_arc: float = TOY_DEFAULTS["azimuth_arc"]
    scale_jitter: float = TOY_DEFAULTS["scale_jitter"]
    seed: int = 0


@dataclass(frozen=True)
class StageConfig:
    stage: str = "s1"
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = PUBLISHED_DEFAULTS["learning_rate"]
    lr_scale: float = TOY_DEFAULTS["lr_scale"]
    sequence_length: int = PUBLISHED_DEFAULTS["sequence_length"]
    seed: int = 0
    cond_dropout: float = TOY_DEFAULTS["cond_dropout"]
    pose_sigma: float = TOY_DEFAULTS["pose_sigma"]
    # "magnitude": perturb p and a, embed |perturbation|; "independent": only draw the scalar
    pose_noise_mode: str = "magnitude"
    # "pose_matched": bald frame j for target j; "single": one bald frame for the whole window
    s3_bald_mode: str = "pose_matched"
    deterministic: bool = True
    log_every: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.learning_rate <= 0 or self.lr_scale <= 0:
            raise ConfigError("learning rate must be positive")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.stage == "s3" and self.sequence_length < 2:
            raise ConfigError("sequence_length must be >= 2 for stage s3")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError("cond_dropout must lie in [0, 1)")
        if self.pose_noise_mode not in ("magnitude", "independent"):
            raise ConfigError(f"unknown pose_noise_mode {self.pose_noise_mode!r}")
        if self.s3_bald_mode not in ("pose_matched", "single"):
            raise ConfigError(f"unknown s3_bald_mode {self.s3_bald_mode!r}")

    @property
    def effective_lr(self) -> float:
        return self.learning_rate * self.lr_scale


STAGES = ("bald", "s1", "s2", "s3")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    train: dict[str, StageConfig] = field(default_factory=dict)
    codec_seed: int = TOY_DEFAULTS["codec_seed"]

    def stage(self, name: str, **overrides) -> StageConfig:
        base = self.train.get(name, StageConfig(stage=name))
        return replace(base, **overrides) if overrides else base

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["model"]["channel_mults"] = list(self.model.channel_mults)
        return out

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "guidance": GuidanceConfig,
}


def _line(node) -> int:
    return node.start_mark.line + 1


def _build(cls, mapping_node, section: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    if not isinstance(mapping_node, yaml.MappingNode):
        raise ConfigError(f"line {_line(mapping_node)}: section '{section}' must be a mapping")
    for key_node, value_node in mapping_node.value:
        key = key_node.value
        if key not in known:
            raise ConfigError(f"line {_line(key_node)}: unknown key '{section}.{key}'")
        value = yaml.safe_load(yaml.serialize(value_node))
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ConfigError, TypeError) as exc:
        raise ConfigError(f"line {_line(mapping_node)}: {section}: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse YAML text into a RunConfig; errors carry 1-based line numbers."""
    try:
        root = yaml.compose(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else 0
        raise ConfigError(f"line {line}: {exc.problem}") from exc
    if root is None:
        return RunConfig()
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"line {_line(root)}: top level must be a mapping")
    parts: dict[str, Any] = {}
    train: dict[str, StageConfig] = {}
    for key_node, value_node in root.value:
        key = key_node.value
        if key in _SECTIONS:
            parts[key] = _build(_SECTIONS[key], value_node, key)
        elif key == "train":
            if not isinstance(value_node, yaml.MappingNode):
                raise ConfigError(f"line {_line(value_node)}: 'train' must be a mapping")
            for stage_node, stage_body in value_node.value:
                name = stage_node.value
                if name not in STAGES:
                    raise ConfigError(f"line {_line(stage_node)}: unknown stage '{name}'")
                cfg = _build(StageConfig, stage_body, f"train.{name}")
                train[name] = replace(cfg, stage=name)
        elif key == "codec_seed":
            parts["codec_seed"] = int(value_node.value)
        else:
            raise ConfigError(f"line {_line(key_node)}: unknown section '{key}'")
    return RunConfig(train=train, **parts)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
