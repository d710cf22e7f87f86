"""Adversarial patches against monocular depth estimation, desk scale.

The package covers the full loop: synthetic scenes with ground-truth
disparity, a small trainable victim model, detector-driven patch placement
under random transforms, the two-term penalized depth loss, Adam patch
optimization, and effect metrics (mean depth error, affected ratio, MSE).
"""

from .config import AttackConfig, apply_overrides, config_hash, load_config, save_config
from .core import BBox, MaskPair, PatchState, clamp01, mask_difference, masked_mean_abs_diff
from .detector import DetectionSet, DetectorConfig, OracleDetector, detect, iou, nms
from .errors import ConfigError, DataError, DepthPatchError, TrainingError
from .losses import (
    LossReport,
    LossWeights,
    depth_loss,
    depth_loss_d1,
    depth_loss_d2,
    make_target_disparity,
    total_loss,
    tv_loss,
)
from .metrics import EvalConfig, EvalRecord, affected_ratio, evaluate_run, mean_depth_error, mse
from .models import (
    DepthModelHandle,
    ToyDepthNet,
    evaluate_model,
    forward,
    forward_batch,
    load_model,
    new_toy_model,
    register_model,
    resolve_model,
    save_model,
    train_toy_model,
)
from .pipeline import build_focus_mask, compose, compose_scene, place_patch
from .scenes import SceneSpec, SyntheticScene, generate_corpus, generate_scene
from .trainer import RunState, attack_step, build_caches, init_patch, run_attack
from .transforms import TransformConfig, TransformSample, apply_photometric, sample_transform

__version__ = "0.1.0"
