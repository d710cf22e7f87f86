"""Run configuration: one dataclass tree, YAML on disk, stable fingerprint."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .detector import DetectorConfig
from .errors import ConfigError
from .losses import LossWeights
from .transforms import TransformConfig


@dataclass(frozen=True)
class AttackConfig:
    epochs: int = 500
    learning_rate: float = 0.01
    patch_scale_factor: float = 0.2
    batch_size: int = 8
    seed: int = 0
    target_class: int = 0
    patch_side: int = 32
    target_mode: str = "constant_far"
    checkpoint_every: int = 50
    shuffle_each_epoch: bool = False
    loss_weights: LossWeights = field(default_factory=LossWeights)
    transforms: TransformConfig = field(default_factory=TransformConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        # 0 is allowed so a null step (losses logged, patch untouched) stays
        # expressible for debugging.
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 < self.patch_scale_factor < 1.0:
            raise ConfigError(
                f"patch_scale_factor must lie in (0, 1), got {self.patch_scale_factor}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patch_side < 2:
            raise ConfigError(f"patch_side must be >= 2, got {self.patch_side}")
        if self.target_mode not in ("constant_far", "border_fill"):
            raise ConfigError(f"unknown target_mode {self.target_mode!r}")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = config_to_dict(value)
        elif isinstance(value, tuple):
            out[f.name] = list(value)
        else:
            out[f.name] = value
    return out


_NESTED_FIELDS = {
    "loss_weights": LossWeights,
    "transforms": TransformConfig,
    "detector": DetectorConfig,
}


def _build(cls, data: dict):
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        if key in _NESTED_FIELDS and isinstance(value, dict):
            kwargs[key] = _build(_NESTED_FIELDS[key], value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> AttackConfig:
    return _build(AttackConfig, data or {})


def load_config(path: str | Path) -> AttackConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse config {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping, got {type(data).__name__}")
    return config_from_dict(data)


def save_config(cfg: AttackConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def config_hash(cfg: AttackConfig) -> str:
    payload = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _deep_merge(base: dict, overrides: dict) -> dict:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def apply_overrides(cfg: AttackConfig, overrides: dict) -> AttackConfig:
    """New config with overrides applied; dotted keys address nested fields."""
    nested: dict = {}
    for key, value in overrides.items():
        parts = key.split(".")
        cursor = nested
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = value
    return config_from_dict(_deep_merge(config_to_dict(cfg), nested))
