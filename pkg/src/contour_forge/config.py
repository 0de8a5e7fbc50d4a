"""Run configuration: one flat record shared by model, training, and CLI.

Strict by design: unknown keys are rejected and ranges are validated on
load, so a config embedded in a checkpoint round-trips to an equal object.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass


class ConfigError(ValueError):
    """Invalid or unknown configuration values."""


@dataclass
class RunConfig:
    # contour / transformer geometry
    n_vertices: int = 32
    encoder_layers: int = 4
    channels: int = 64
    heads: int = 4
    stages: int = 2
    # thresholds
    tau_a: float = 0.45
    tau_b: float = 0.5
    # loss weights (box, initial offsets, deformation, re-score)
    lambda_box: float = 1.0
    lambda_off1: float = 1.0
    lambda_off2: float = 0.1
    lambda_rescore: float = 2.0
    qfl_beta: float = 2.0
    dropout: float = 0.1
    # schedule
    seed: int = 0
    steps: int = 2000
    lr: float = 1e-3
    lr_decay_step: int = 1500
    lr_decay: float = 0.1
    # strategy switches (ablation arms)
    adaptive_training: bool = True
    rescore: bool = True
    # data / runtime
    train_dtype: str = "float32"
    image_size: int = 128
    in_channels: int = 1
    max_train_detections: int = 16
    max_detections: int = 64
    checkpoint_every: int = 500

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_vertices < 4:
            raise ConfigError(f"n_vertices must be >= 4, got {self.n_vertices}")
        if self.encoder_layers < 1:
            raise ConfigError("encoder_layers must be >= 1")
        if self.channels % self.heads != 0:
            raise ConfigError(f"channels ({self.channels}) must divide by heads ({self.heads})")
        if self.stages < 0:
            raise ConfigError("stages must be >= 0")
        for name in ("tau_a", "tau_b"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        for name in ("lambda_box", "lambda_off1", "lambda_off2", "lambda_rescore", "qfl_beta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.train_dtype not in ("float32", "float64"):
            raise ConfigError(f"train_dtype must be float32 or float64, got {self.train_dtype!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.image_size % 4 != 0:
            raise ConfigError("image_size must be a multiple of the feature stride (4)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config file must hold a JSON object")
        if overrides:
            data.update(overrides)
        return cls.from_dict(data)

    def replace(self, **kwargs) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **kwargs})
