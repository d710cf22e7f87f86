"""Attack-effect metrics and whole-run evaluation.

All three metrics compare the clean prediction (taken as ground truth)
against the prediction under the patched image: mean absolute disparity
change over the focus region, the fraction of focus pixels whose disparity
moved by more than a threshold, and full-image MSE. Computed in float64.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .core import check_mask
from .errors import ConfigError, DataError
from .models import DepthModelHandle, forward_batch
from .pipeline import compose_scene
from .transforms import TransformConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalRecord:
    image_id: str
    e_d: float
    r_a: float
    mse: float
    mask_area: int

    def as_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "e_d": self.e_d,
            "r_a": self.r_a,
            "mse": self.mse,
            "mask_area": self.mask_area,
        }


def mean_depth_error(d: np.ndarray, d_adv: np.ndarray, m_f: np.ndarray) -> float:
    """Mask-averaged absolute disparity change caused by the attack."""
    d = np.asarray(d, np.float64)
    d_adv = np.asarray(d_adv, np.float64)
    m = check_mask(m_f).astype(np.float64)
    if d.shape != d_adv.shape or d.shape != m.shape:
        raise DataError(f"shape mismatch: {d.shape}, {d_adv.shape}, {m.shape}")
    area = m.sum()
    if area == 0:
        raise DataError("empty focus mask")
    return float(np.sum(np.abs(d - d_adv) * m) / area)


def affected_ratio(
    d: np.ndarray, d_adv: np.ndarray, m_f: np.ndarray, threshold: float = 0.1
) -> float:
    """Fraction of focus pixels whose disparity moved strictly beyond the threshold."""
    d = np.asarray(d, np.float64)
    d_adv = np.asarray(d_adv, np.float64)
    m = check_mask(m_f).astype(np.float64)
    if d.shape != d_adv.shape or d.shape != m.shape:
        raise DataError(f"shape mismatch: {d.shape}, {d_adv.shape}, {m.shape}")
    area = m.sum()
    if area == 0:
        raise DataError("empty focus mask")
    affected = (np.abs(d - d_adv) * m) > threshold
    return float(affected.sum() / area)


def mse(d: np.ndarray, d_adv: np.ndarray) -> float:
    """Full-image mean squared disparity difference."""
    d = np.asarray(d, np.float64)
    d_adv = np.asarray(d_adv, np.float64)
    if d.shape != d_adv.shape:
        raise DataError(f"shape mismatch: {d.shape} vs {d_adv.shape}")
    diff = d_adv - d
    return float(np.mean(diff * diff))


@dataclass(frozen=True)
class EvalConfig:
    patch_scale_factor: float = 0.2
    target_class: int = 0
    affected_threshold: float = 0.1
    # identity placement by default for reproducibility; "sampled" draws
    # seeded transforms for robustness curves.
    transform_mode: str = "identity"
    transforms: TransformConfig = field(default_factory=TransformConfig)
    seed: int = 0

    def __post_init__(self):
        if self.transform_mode not in ("identity", "sampled"):
            raise ConfigError(f"unknown transform_mode {self.transform_mode!r}")


def evaluate_run(
    patch: np.ndarray,
    dataset,
    model: DepthModelHandle,
    cfg: EvalConfig = EvalConfig(),
) -> tuple[list[EvalRecord], dict]:
    """Per-scene records plus unweighted aggregate means.

    Focus masks come from clean-image detections; scenes without a
    detection of the target class are skipped (and counted). The patched
    prediction uses the same composition pipeline as training.
    """
    patch_t = torch.from_numpy(np.asarray(patch, np.float32))
    records: list[EvalRecord] = []
    skipped = 0
    for index, record in enumerate(dataset):
        boxes = [b for b in record.detections if b.class_id == cfg.target_class]
        if not boxes:
            skipped += 1
            continue
        detections = type(record.detections)(image_id=record.image_id, boxes=tuple(boxes))
        image_t = torch.from_numpy(record.image)
        if cfg.transform_mode == "sampled":
            seeds = [
                int(np.random.SeedSequence(cfg.seed, spawn_key=(index, k)).generate_state(1)[0])
                for k in range(len(boxes))
            ]
            freeze = False
        else:
            seeds = None
            freeze = True
        with torch.no_grad():
            comp = compose_scene(
                image_t,
                patch_t,
                detections,
                cfg.transforms,
                cfg.patch_scale_factor,
                seeds=seeds,
                freeze_transforms=freeze,
            )
            if not comp.focus_masks:
                skipped += 1
                continue
            batch = torch.stack([image_t, comp.image])
            disparities = forward_batch(model, batch).numpy().astype(np.float64)
        d_clean, d_adv = disparities[0], disparities[1]
        focus_union = np.zeros(d_clean.shape, np.float32)
        for focus in comp.focus_masks:
            focus_union = np.maximum(focus_union, focus.numpy())
        records.append(
            EvalRecord(
                image_id=record.image_id,
                e_d=mean_depth_error(d_clean, d_adv, focus_union),
                r_a=affected_ratio(d_clean, d_adv, focus_union, cfg.affected_threshold),
                mse=mse(d_clean, d_adv),
                mask_area=int(focus_union.sum()),
            )
        )
    if not records:
        raise DataError(
            f"no evaluable scenes: every image lacked a detection of class {cfg.target_class}"
        )
    if skipped:
        logger.info("evaluation skipped %d scene(s) without target detections", skipped)
    aggregate = {
        "e_d": float(np.mean([r.e_d for r in records])),
        "r_a": float(np.mean([r.r_a for r in records])),
        "mse": float(np.mean([r.mse for r in records])),
        "scenes": len(records),
        "skipped": skipped,
    }
    return records, aggregate
