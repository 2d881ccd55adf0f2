"""Run configuration. Field defaults for optimisation follow the reference
training recipe; model geometry defaults are desk scale."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

MODES = ("full", "no_clip", "no_crossdomain")


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 4
    video_layers: int = 2
    question_layers: int = 2
    fusion_layers: int = 2
    clip_layers: int = 2
    clip_width: int = 16
    clip_heads: int = 2
    frames: int = 4
    image_size: int = 32
    patch: int = 8
    question_len: int = 12
    prompt_len: int = 16  # includes the class token
    keyframes: int = 1
    mlp_ratio: int = 4
    fusion_weights: str = "full"  # or "diagonal"

    @classmethod
    def reference(cls) -> "ModelConfig":
        return cls(
            d=768,
            heads=12,
            video_layers=12,
            question_layers=6,
            fusion_layers=6,
            clip_layers=12,
            clip_width=512,
            clip_heads=8,
            frames=16,
            image_size=224,
            patch=32,
            question_len=32,
            prompt_len=77,
        )

    def validate(self) -> None:
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.clip_width % self.clip_heads:
            raise ConfigError(f"clip_width={self.clip_width} not divisible by clip_heads={self.clip_heads}")
        if self.image_size % self.patch:
            raise ConfigError(f"image_size={self.image_size} not divisible by patch={self.patch}")
        if self.frames < 1 or self.keyframes < 1:
            raise ConfigError("frames and keyframes must be >= 1")
        if self.prompt_len < 2 or self.question_len < 1:
            raise ConfigError("prompt_len must be >= 2 and question_len >= 1")
        if self.fusion_weights not in ("full", "diagonal"):
            raise ConfigError(f"unknown fusion_weights {self.fusion_weights!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 1e-3
    batch_size: int = 24
    epochs: int = 15
    resample_frames: bool = True  # fresh T-frame draw per training step
    seed: int = 0
    mode: str = "full"
    clip_frozen: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_floor: float = 0.0
    precision: str = "float32"
    clip_pretrain_steps: int = 1000
    clip_pretrain_lr: float = 3e-3
    clip_temperature_lr_mult: float = 10.0  # log-temperature step size relative to clip_pretrain_lr
    clip_pretrain_batch: int = 16
    clip_pretrain_seed: int = 0
    keyframe_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    model: ModelConfig = field(default_factory=ModelConfig)

    @classmethod
    def desk(cls, **changes) -> "TrainConfig":
        """Optimiser settings that converge within 15 epochs on the desk dataset."""
        return cls(**{"learning_rate": 1e-3, "batch_size": 8, **changes})

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        self.model.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        model_data = data.pop("model", {})
        bad = set(model_data) - {f.name for f in dataclasses.fields(ModelConfig)}
        if bad:
            raise ConfigError(f"unknown model config fields: {sorted(bad)}")
        model = ModelConfig(**model_data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(model=model, **data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)
