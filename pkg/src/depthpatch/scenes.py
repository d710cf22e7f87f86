"""Synthetic road-like scenes with exact ground-truth disparity and boxes.

Scenes are a desk-scale stand-in for driving footage: a sky/ground gradient
background plus textured rectangles ("cars") and ellipses ("pedestrians")
on depth layers. Apparent size, vertical position, and atmospheric fading
all correlate with depth, giving the toy network real monocular cues to
learn. Disparity uses 1 = closest; objects always sit strictly in front of
the background they occlude.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import BBox, clamp01
from .detector import iou
from .errors import ConfigError, DataError

CAR_CLASS = 0
PEDESTRIAN_CLASS = 1


@dataclass(frozen=True)
class SceneSpec:
    height: int = 48
    width: int = 96
    min_objects: int = 1
    max_objects: int = 2
    classes: tuple[int, ...] = (CAR_CLASS, PEDESTRIAN_CLASS)
    depth_range: tuple[float, float] = (0.5, 0.92)
    # Camera pitch varies scene to scene: the horizon line is sampled from
    # this range, so absolute depth is only readable from global geometry
    # (object position relative to the horizon), not from local texture.
    horizon_frac_range: tuple[float, float] = (0.22, 0.46)
    # Physical object size varies, so apparent size alone does not pin depth.
    size_jitter: float = 0.2
    background_disparity: tuple[float, float] = (0.02, 0.45)
    haze_strength: float = 0.0
    haze_color: tuple[float, float, float] = (0.72, 0.76, 0.82)
    max_overlap_iou: float = 0.3
    placement_attempts: int = 60

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"scene frame too small: {self.height}x{self.width}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError(
                f"invalid object count range [{self.min_objects}, {self.max_objects}]"
            )
        lo, hi = self.depth_range
        if not (0 < lo < hi <= 1):
            raise ConfigError(f"invalid depth range {self.depth_range}")
        h_lo, h_hi = self.horizon_frac_range
        if not (0.05 <= h_lo <= h_hi <= 0.8):
            raise ConfigError(f"invalid horizon range {self.horizon_frac_range}")
        if self.background_disparity[1] >= lo:
            raise ConfigError("background disparity must stay below every object layer")
        if self.max_objects > 0 and not self.classes:
            raise ConfigError("spec allows objects but lists no classes")


@dataclass
class SyntheticScene:
    image: np.ndarray
    true_disparity: np.ndarray
    objects: list[BBox] = field(default_factory=list)
    scene_id: str = ""


def _object_dims(class_id: int, depth_norm: float, spec: SceneSpec) -> tuple[float, float]:
    """Apparent (h, w) in pixels; nearer objects are larger."""
    unit = spec.height / 48.0
    if class_id == CAR_CLASS:
        h = (10.0 + 16.0 * depth_norm) * unit
        return h, 1.7 * h
    h = (12.0 + 18.0 * depth_norm) * unit
    return h, 0.45 * h


def _background(
    rng: np.random.Generator, spec: SceneSpec, horizon: int
) -> tuple[np.ndarray, np.ndarray]:
    height, width = spec.height, spec.width
    ys = np.arange(height, dtype=np.float32)[:, None, None]
    sky_top = np.array([0.55, 0.65, 0.80], np.float32) + rng.uniform(-0.05, 0.05, 3).astype(np.float32)
    sky_bot = np.array([0.74, 0.77, 0.80], np.float32)
    ground_top = np.array([0.46, 0.43, 0.40], np.float32) + rng.uniform(-0.04, 0.04, 3).astype(np.float32)
    ground_bot = np.array([0.24, 0.23, 0.22], np.float32)
    image = np.empty((height, width, 3), np.float32)
    sky_frac = ys[:horizon] / max(horizon - 1, 1)
    image[:horizon] = sky_top + (sky_bot - sky_top) * sky_frac
    ground_frac = (ys[horizon:] - horizon) / max(height - 1 - horizon, 1)
    image[horizon:] = ground_top + (ground_bot - ground_top) * ground_frac
    image += rng.normal(0.0, 0.015, size=image.shape).astype(np.float32)

    disp_lo, disp_hi = spec.background_disparity
    disparity = np.full((height, width), disp_lo, np.float32)
    ramp = (np.arange(height - horizon, dtype=np.float32) / max(height - 1 - horizon, 1))
    disparity[horizon:] = disp_lo + (disp_hi - disp_lo) * ramp[:, None]
    return clamp01(image), disparity


def _texture(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Striped/checkered modulation field in [-1, 1]."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    period = rng.uniform(2.5, 7.0)
    phase = rng.uniform(0, 2 * np.pi)
    kind = rng.integers(0, 3)
    if kind == 0:
        return np.sin(2 * np.pi * xx / period + phase)
    if kind == 1:
        return np.sin(2 * np.pi * yy / period + phase)
    return np.sin(2 * np.pi * xx / period + phase) * np.sin(2 * np.pi * yy / period + phase)


def _paint_object(
    image: np.ndarray,
    disparity: np.ndarray,
    box: BBox,
    depth: float,
    depth_norm: float,
    rng: np.random.Generator,
    spec: SceneSpec,
) -> None:
    rows, cols = box.pixel_slices(image.shape[:2])
    h = rows.stop - rows.start
    w = cols.stop - cols.start
    base = rng.uniform(0.1, 0.9, size=3).astype(np.float32)
    tex = _texture(rng, (h, w))[:, :, None] * rng.uniform(0.08, 0.25)
    block = clamp01(base[None, None, :] + tex)
    if box.class_id == PEDESTRIAN_CLASS:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        inside = (
            ((xx - (w - 1) / 2) / max(w / 2, 1e-6)) ** 2
            + ((yy - (h - 1) / 2) / max(h / 2, 1e-6)) ** 2
        ) <= 1.0
    else:
        inside = np.ones((h, w), bool)
    # Atmospheric fading: distant objects wash toward the haze color.
    haze = spec.haze_strength * (1.0 - depth_norm)
    block = (1.0 - haze) * block + haze * np.array(spec.haze_color, np.float32)
    region = image[rows, cols]
    region[inside] = block[inside]
    disparity[rows, cols][inside] = depth


def generate_scene(rng: np.random.Generator, spec: SceneSpec = SceneSpec()) -> SyntheticScene:
    """Render one scene; deterministic given the generator state."""
    horizon = int(round(rng.uniform(*spec.horizon_frac_range) * spec.height))
    image, disparity = _background(rng, spec, horizon)
    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    z_lo, z_hi = spec.depth_range
    placed: list[tuple[BBox, float]] = []
    for _ in range(n_objects):
        class_id = int(rng.choice(spec.classes))
        box = None
        for _attempt in range(spec.placement_attempts):
            depth = float(rng.uniform(z_lo, z_hi))
            depth_norm = (depth - z_lo) / (z_hi - z_lo)
            h, w = _object_dims(class_id, depth_norm, spec)
            jitter = 1.0 + float(rng.uniform(-spec.size_jitter, spec.size_jitter))
            h, w = h * jitter, w * jitter
            if w + 2 >= spec.width or h + 2 >= spec.height:
                continue
            ground_span = spec.height - 2 - horizon
            y_bottom = horizon + depth_norm * ground_span + rng.uniform(-1.5, 1.5)
            cy = float(np.clip(y_bottom - h / 2, h / 2 + 1, spec.height - h / 2 - 1))
            cx = float(rng.uniform(w / 2 + 1, spec.width - w / 2 - 1))
            candidate = BBox(cx=cx, cy=cy, w=float(w), h=float(h), score=1.0, class_id=class_id)
            if all(iou(candidate, other) <= spec.max_overlap_iou for other, _ in placed):
                box = candidate
                placed.append((box, depth))
                break
        if box is None:
            raise DataError(
                f"could not place object {len(placed) + 1}/{n_objects} after "
                f"{spec.placement_attempts} attempts; scene spec is overconstrained"
            )
    # Painter's order: far objects first so nearer ones occlude them.
    for box, depth in sorted(placed, key=lambda item: item[1]):
        depth_norm = (depth - z_lo) / (z_hi - z_lo)
        _paint_object(image, disparity, box, depth, depth_norm, rng, spec)
    return SyntheticScene(
        image=clamp01(image).astype(np.float32),
        true_disparity=disparity.astype(np.float32),
        objects=[box for box, _ in placed],
    )


def generate_corpus(
    seed: int, count: int, spec: SceneSpec = SceneSpec()
) -> list[SyntheticScene]:
    """Deterministic scene list; scene i depends only on (seed, i)."""
    scenes = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        scene = generate_scene(rng, spec)
        scene.scene_id = f"scene_{i:05d}"
        scenes.append(scene)
    return scenes


def corpus_boxes(scenes: Sequence[SyntheticScene]) -> dict[str, list[BBox]]:
    """Annotation mapping for the oracle detector."""
    return {scene.scene_id: list(scene.objects) for scene in scenes}
