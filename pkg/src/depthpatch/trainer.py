"""Patch optimization loop: Adam on patch pixels under sampled transforms.

Every stochastic choice (per-epoch shuffles, per-detection transforms) is
derived from (seed, epoch, image, detection) key tuples, never from shared
generator state, so a resumed run replays the identical trajectory. The
Adam update (beta1 0.9, beta2 0.999, eps 1e-8, bias correction) is applied
directly to the float32 patch so checkpoints capture the exact optimizer
state; the patch is clamped back into [0, 1] after every step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import AttackConfig, config_hash, config_to_dict, save_config
from .core import PatchState
from .data_io import Dataset, SceneRecord, atomic_write_json, save_patch
from .detector import DetectionSet
from .errors import ConfigError, TrainingError
from .losses import LossReport, depth_loss, make_target_disparity, total_loss, tv_loss
from .metrics import EvalConfig, evaluate_run
from .models import DepthModelHandle, forward_batch, freeze_model
from .pipeline import compose_scene

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Leading tags keep the derived seed streams for shuffling and transform
# sampling disjoint.
_SHUFFLE_TAG = 0
_TRANSFORM_TAG = 1


@dataclass
class RunState:
    patch: PatchState
    epoch: int = 0
    best_metric: float = math.inf
    rng_state: dict = field(default_factory=dict)
    history: list[LossReport] = field(default_factory=list)


def init_patch(side: int, rng: np.random.Generator | int, config_fingerprint: str = "") -> PatchState:
    """Uniform random patch in [0, 1] with fresh optimizer state."""
    if side < 2:
        raise ConfigError(f"patch side must be >= 2, got {side}")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else -1
    gen = np.random.default_rng(rng) if seed >= 0 else rng
    data = gen.random((side, side, 3), dtype=np.float32)
    return PatchState(data=data, seed=seed, config_fingerprint=config_fingerprint)


def _image_key(image_id: str) -> int:
    return int(hashlib.sha256(image_id.encode()).hexdigest()[:8], 16)


def _transform_seed(master_seed: int, epoch: int, image_id: str, det_index: int) -> int:
    seq = np.random.SeedSequence(
        master_seed, spawn_key=(_TRANSFORM_TAG, epoch, _image_key(image_id), det_index)
    )
    return int(seq.generate_state(1)[0])


def _shuffle_order(master_seed: int, epoch: int, count: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(_SHUFFLE_TAG, epoch)))
    return rng.permutation(count)


@dataclass
class _SceneCache:
    """Per-image constants: filtered detections, target/focus maps per detection."""

    record: SceneRecord
    detections: DetectionSet
    image_t: torch.Tensor
    targets: list[torch.Tensor]  # d_t per detection, aligned with detections.boxes
    focuses: list[torch.Tensor]


def build_caches(dataset: Dataset, model: DepthModelHandle, cfg: AttackConfig) -> list[_SceneCache]:
    """Precompute clean predictions and per-detection target maps.

    The victim is frozen, so the clean prediction of every training image
    is constant across the run and can be cached up front.
    """
    from .pipeline import build_focus_mask  # local import to keep module deps tidy

    caches: list[_SceneCache] = []
    records = list(dataset)
    batch_size = 32
    with torch.no_grad():
        clean_maps = []
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            batch = torch.from_numpy(np.stack([r.image for r in chunk]))
            clean_maps.append(forward_batch(model, batch).numpy())
    clean_by_index = np.concatenate(clean_maps, axis=0) if clean_maps else np.zeros((0,))
    for idx, record in enumerate(records):
        boxes = tuple(b for b in record.detections if b.class_id == cfg.target_class)
        if not boxes:
            continue
        d_clean = clean_by_index[idx]
        targets = []
        focuses = []
        detections = DetectionSet(image_id=record.image_id, boxes=boxes)
        for box in boxes:
            focus = build_focus_mask(box, record.image.shape[:2])
            d_t = make_target_disparity(d_clean, focus, cfg.target_mode)
            targets.append(torch.from_numpy(d_t.astype(np.float32)))
            focuses.append(torch.from_numpy(focus))
        caches.append(
            _SceneCache(
                record=record,
                detections=detections,
                image_t=torch.from_numpy(record.image),
                targets=targets,
                focuses=focuses,
            )
        )
    return caches


def attack_step(
    state: RunState,
    batch: list[_SceneCache],
    model: DepthModelHandle,
    cfg: AttackConfig,
    epoch: int = 0,
) -> LossReport | None:
    """One optimizer step over a batch of cached scenes; mutates `state`.

    Composites every scene under freshly derived transforms, runs the
    frozen victim, averages per-detection losses, and applies one Adam
    update to the patch pixels. Returns the loss report, or None when the
    batch held no usable detections (step skipped).
    """
    patch_t = torch.from_numpy(state.patch.data.copy()).requires_grad_(True)
    composites = []
    per_det: list[tuple[int, torch.Tensor, torch.Tensor, torch.Tensor]] = []
    for cache in batch:
        seeds = [
            _transform_seed(cfg.seed, epoch, cache.record.image_id, k)
            for k in range(len(cache.detections.boxes))
        ]
        comp = compose_scene(
            cache.image_t,
            patch_t,
            cache.detections,
            cfg.transforms,
            cfg.patch_scale_factor,
            seeds=seeds,
        )
        if not comp.indices:
            continue
        b = len(composites)
        composites.append(comp.image)
        for pos, orig_index in enumerate(comp.indices):
            per_det.append(
                (b, cache.targets[orig_index], cache.focuses[orig_index], comp.patch_masks[pos])
            )
    if not composites:
        logger.warning("attack step skipped: no usable detections in batch")
        return None

    d_adv = forward_batch(model, torch.stack(composites))
    depth_terms = []
    d1_terms = []
    d2_terms = []
    for b, d_t, focus, patch_mask in per_det:
        combined, d1, d2 = depth_loss(d_t, d_adv[b], focus, patch_mask, cfg.loss_weights)
        depth_terms.append(combined)
        d1_terms.append(d1)
        d2_terms.append(d2)
    l_depth = torch.stack(depth_terms).mean()
    l_tv = tv_loss(patch_t)
    total, report = total_loss(
        l_depth,
        l_tv,
        cfg.loss_weights,
        l_d1=torch.stack(d1_terms).mean(),
        l_d2=torch.stack(d2_terms).mean(),
    )
    if not math.isfinite(report.l_total):
        raise TrainingError(
            f"loss diverged (l_total={report.l_total}) at epoch {epoch}; "
            f"seed={cfg.seed} lr={cfg.learning_rate}"
        )
    total.backward()
    grad = patch_t.grad.detach().numpy().astype(np.float32)

    patch = state.patch
    step = patch.step + 1
    exp_avg = ADAM_BETA1 * patch.exp_avg + (1.0 - ADAM_BETA1) * grad
    exp_avg_sq = ADAM_BETA2 * patch.exp_avg_sq + (1.0 - ADAM_BETA2) * grad * grad
    bias1 = 1.0 - ADAM_BETA1**step
    bias2 = 1.0 - ADAM_BETA2**step
    update = (exp_avg / bias1) / (np.sqrt(exp_avg_sq / bias2) + ADAM_EPS)
    data = np.clip(patch.data - np.float32(cfg.learning_rate) * update, 0.0, 1.0)
    state.patch = PatchState(
        data=data.astype(np.float32),
        exp_avg=exp_avg.astype(np.float32),
        exp_avg_sq=exp_avg_sq.astype(np.float32),
        step=step,
        epoch=epoch,
        seed=patch.seed,
        config_fingerprint=patch.config_fingerprint,
    )
    state.history.append(report)
    state.best_metric = min(state.best_metric, report.l_total)
    return report


def _checkpoint_dir(run_dir: Path, epoch: int) -> Path:
    return run_dir / "checkpoints" / f"epoch_{epoch:06d}"


def write_checkpoint(run_dir: Path, state: RunState, cfg: AttackConfig) -> Path:
    """Atomic checkpoint: patch PNG + manifest + full-precision moments."""
    target = _checkpoint_dir(run_dir, state.epoch)
    target.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=target.parent, prefix=f".{target.name}."))
    try:
        save_patch(state.patch, staging)
        np.savez(
            staging / "moments.npz",
            patch=state.patch.data,
            exp_avg=state.patch.exp_avg,
            exp_avg_sq=state.patch.exp_avg_sq,
            step=np.int64(state.patch.step),
            epoch=np.int64(state.epoch),
            best_metric=np.float64(state.best_metric),
        )
        manifest = {
            "epoch": state.epoch,
            "config_hash": config_hash(cfg),
            "moments": "moments.npz",
            "rng_state": state.rng_state,
        }
        (staging / "manifest.json").write_text(json.dumps(manifest, indent=2))
        if target.exists():
            shutil.rmtree(target)
        os.replace(staging, target)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return target


def read_checkpoint(checkpoint_dir: str | Path, cfg: AttackConfig) -> RunState:
    checkpoint_dir = Path(checkpoint_dir)
    manifest = json.loads((checkpoint_dir / "manifest.json").read_text())
    if manifest["config_hash"] != config_hash(cfg):
        raise ConfigError(
            f"checkpoint {checkpoint_dir} was written under a different config "
            "(hash mismatch); refusing to resume"
        )
    moments = np.load(checkpoint_dir / "moments.npz")
    patch = PatchState(
        data=moments["patch"].astype(np.float32),
        exp_avg=moments["exp_avg"].astype(np.float32),
        exp_avg_sq=moments["exp_avg_sq"].astype(np.float32),
        step=int(moments["step"]),
        epoch=int(moments["epoch"]),
        seed=cfg.seed,
        config_fingerprint=manifest["config_hash"],
    )
    return RunState(
        patch=patch,
        epoch=int(moments["epoch"]),
        best_metric=float(moments["best_metric"]),
        rng_state=manifest.get("rng_state", {}),
    )


def latest_checkpoint(run_dir: str | Path) -> Path | None:
    root = Path(run_dir) / "checkpoints"
    if not root.is_dir():
        return None
    candidates = sorted(p for p in root.iterdir() if p.name.startswith("epoch_"))
    return candidates[-1] if candidates else None


def _truncate_log(log_path: Path, resume_epoch: int) -> None:
    if not log_path.exists():
        return
    kept = [
        line
        for line in log_path.read_text().splitlines()
        if line.strip() and json.loads(line)["epoch"] < resume_epoch
    ]
    log_path.write_text("".join(row + "\n" for row in kept))


def run_attack(
    dataset: Dataset,
    model: DepthModelHandle,
    cfg: AttackConfig,
    out_dir: str | Path | None = None,
    resume: bool = False,
    val_dataset: Dataset | None = None,
) -> tuple[PatchState, dict]:
    """Full optimization run with checkpointing and a final evaluation report.

    The victim is frozen for the duration; its parameter checksum is
    verified unchanged at the end. Deterministic given (config, seed,
    dataset): replaying reproduces the identical loss history.
    """
    start_time = time.time()
    freeze_model(model)
    checksum_before = model.checksum()
    fingerprint = config_hash(cfg)

    caches = build_caches(dataset, model, cfg)
    total_detections = sum(len(c.detections.boxes) for c in caches)
    if total_detections == 0:
        raise TrainingError(
            f"dataset contains no detections of target class {cfg.target_class}; "
            "nothing to attack"
        )
    logger.info(
        "attacking %d scene(s) with %d detection(s) of class %d",
        len(caches), total_detections, cfg.target_class,
    )

    run_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, run_dir / "config.yaml")
        log_path = run_dir / "train_log.jsonl"

    state = None
    if resume and run_dir is not None:
        checkpoint = latest_checkpoint(run_dir)
        if checkpoint is not None:
            state = read_checkpoint(checkpoint, cfg)
            logger.info("resuming from %s (epoch %d)", checkpoint, state.epoch)
            if log_path is not None:
                _truncate_log(log_path, state.epoch)
    if state is None:
        state = RunState(patch=init_patch(cfg.patch_side, cfg.seed, fingerprint))
        state.rng_state = {"scheme": "seed-derived", "master_seed": cfg.seed}
        if log_path is not None and log_path.exists():
            log_path.unlink()

    log_handle = open(log_path, "a") if log_path is not None else None
    try:
        for epoch in range(state.epoch, cfg.epochs):
            if cfg.shuffle_each_epoch:
                order = _shuffle_order(cfg.seed, epoch, len(caches))
            else:
                order = np.arange(len(caches))
            for step_index, start in enumerate(range(0, len(caches), cfg.batch_size)):
                batch = [caches[i] for i in order[start : start + cfg.batch_size]]
                report = attack_step(state, batch, model, cfg, epoch=epoch)
                if report is not None and log_handle is not None:
                    log_handle.write(json.dumps(report.log_row(epoch, step_index)) + "\n")
            if log_handle is not None:
                log_handle.flush()
            state.epoch = epoch + 1
            if run_dir is not None and (
                state.epoch % cfg.checkpoint_every == 0 or state.epoch == cfg.epochs
            ):
                write_checkpoint(run_dir, state, cfg)
    finally:
        if log_handle is not None:
            log_handle.close()

    checksum_after = model.checksum()
    if checksum_after != checksum_before:
        raise TrainingError("victim parameters changed during the attack run")

    eval_cfg = EvalConfig(
        patch_scale_factor=cfg.patch_scale_factor,
        target_class=cfg.target_class,
        seed=cfg.seed,
    )
    records, aggregate = evaluate_run(
        state.patch.data, val_dataset if val_dataset is not None else dataset, model, eval_cfg
    )
    report = {
        "config": config_to_dict(cfg),
        "config_hash": fingerprint,
        "dataset_hash": dataset.manifest.content_hash,
        "model_checksum": checksum_after,
        "epochs": state.epoch,
        "final_losses": state.history[-1].as_dict() if state.history else None,
        "best_l_total": state.best_metric,
        "metrics": aggregate,
        "records": [r.as_dict() for r in records],
        "runtime_seconds": time.time() - start_time,
    }
    if run_dir is not None:
        save_patch(state.patch, run_dir)
        atomic_write_json(run_dir / "eval_report.json", report)
    return state.patch, report
