"""Random geometric/photometric transform sampling for patch training.

Each optimization step draws one transform per pasted patch so the patch
survives viewing variation: rotation, scale jitter around the box-anchored
size, per-pixel noise, contrast, and brightness shifts. Sampling is
reproducible from an integer seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError

Range = tuple[float, float]


def _check_range(name: str, rng: Range) -> None:
    lo, hi = rng
    if lo > hi:
        raise ConfigError(f"transform range {name} is inverted: [{lo}, {hi}]")


@dataclass(frozen=True)
class TransformConfig:
    """Sampling ranges for the patch transformer (uniform within each)."""

    rotation_deg: Range = (-20.0, 20.0)
    scale_jitter: Range = (0.9, 1.1)
    noise: Range = (-0.1, 0.1)
    contrast: Range = (0.8, 1.2)
    brightness: Range = (-0.1, 0.1)

    def __post_init__(self):
        for name in ("rotation_deg", "scale_jitter", "noise", "contrast", "brightness"):
            _check_range(name, getattr(self, name))

    @classmethod
    def identity(cls) -> "TransformConfig":
        """All ranges collapsed to the neutral point (debugging, evaluation)."""
        return cls(
            rotation_deg=(0.0, 0.0),
            scale_jitter=(1.0, 1.0),
            noise=(0.0, 0.0),
            contrast=(1.0, 1.0),
            brightness=(0.0, 0.0),
        )


@dataclass(frozen=True)
class TransformSample:
    """One realization of the transform ranges, tied to the seed that drew it."""

    scale: float = 1.0
    rotation_deg: float = 0.0
    noise: np.ndarray = field(default_factory=lambda: np.zeros((1, 1, 1), np.float32))
    contrast: float = 1.0
    brightness: float = 0.0
    rng_seed: int = -1


def identity_sample() -> TransformSample:
    return TransformSample()


def sample_transform(
    rng: np.random.Generator | int,
    cfg: TransformConfig,
    noise_shape: tuple[int, int, int] = (1, 1, 1),
) -> TransformSample:
    """Draw one uniform sample from every configured range.

    `rng` may be a Generator or an integer seed; passing the same seed twice
    yields identical samples. `noise_shape` should match the patch so the
    per-pixel noise field lines up with it.
    """
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        gen = np.random.default_rng(seed)
    else:
        seed = -1
        gen = rng
    return TransformSample(
        scale=float(gen.uniform(*cfg.scale_jitter)),
        rotation_deg=float(gen.uniform(*cfg.rotation_deg)),
        noise=gen.uniform(*cfg.noise, size=noise_shape).astype(np.float32),
        contrast=float(gen.uniform(*cfg.contrast)),
        brightness=float(gen.uniform(*cfg.brightness)),
        rng_seed=seed,
    )


def apply_photometric(patch: torch.Tensor, t: TransformSample) -> torch.Tensor:
    """Contrast/brightness/noise on the patch, clamped back into [0, 1].

    Differentiable w.r.t. the patch wherever the clamp is inactive.
    """
    noise = torch.as_tensor(t.noise, dtype=patch.dtype, device=patch.device)
    return torch.clamp(t.contrast * patch + t.brightness + noise, 0.0, 1.0)
