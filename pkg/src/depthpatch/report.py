"""Plot emission for finished runs: loss curves, metric charts, image grids."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .data_io import Dataset, read_jsonl
from .errors import DataError
from .metrics import EvalConfig
from .models import DepthModelHandle, forward_batch
from .pipeline import compose_scene

__all__ = ["plot_loss_curves", "plot_metric_charts", "plot_disparity_grid", "generate_report"]


def plot_loss_curves(log_path: str | Path, out_path: str | Path) -> Path:
    rows = read_jsonl(log_path)
    if not rows:
        raise DataError(f"empty training log {log_path}")
    steps = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("l_total", "l_depth", "l_tv"):
        ax.plot(steps, [row[key] for row in rows], label=key, linewidth=1)
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("patch optimization")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_metric_charts(report_path: str | Path, out_path: str | Path) -> Path:
    report = json.loads(Path(report_path).read_text())
    records = report.get("records", [])
    if not records:
        raise DataError(f"report {report_path} holds no per-scene records")
    e_d = [r["e_d"] for r in records]
    r_a = [r["r_a"] for r in records]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].hist(e_d, bins=20, color="#d45500")
    axes[0].axvline(float(np.mean(e_d)), color="k", linestyle="--", label="mean")
    axes[0].set_title("mean depth error per scene")
    axes[0].legend()
    axes[1].hist(r_a, bins=20, color="#2255aa")
    axes[1].axvline(float(np.mean(r_a)), color="k", linestyle="--", label="mean")
    axes[1].set_title("affected ratio per scene")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_disparity_grid(
    model: DepthModelHandle,
    dataset: Dataset,
    patch: np.ndarray,
    out_path: str | Path,
    cfg: EvalConfig = EvalConfig(),
    scenes: int = 4,
) -> Path:
    """Before/after grid: image and predicted disparity, clean vs patched."""
    patch_t = torch.from_numpy(np.asarray(patch, np.float32))
    columns = []
    for record in dataset:
        boxes = [b for b in record.detections if b.class_id == cfg.target_class]
        if not boxes:
            continue
        detections = type(record.detections)(image_id=record.image_id, boxes=tuple(boxes))
        image_t = torch.from_numpy(record.image)
        with torch.no_grad():
            comp = compose_scene(
                image_t, patch_t, detections, cfg.transforms,
                cfg.patch_scale_factor, freeze_transforms=True,
            )
            maps = forward_batch(model, torch.stack([image_t, comp.image])).numpy()
        columns.append((record.image, comp.image.numpy(), maps[0], maps[1]))
        if len(columns) >= scenes:
            break
    if not columns:
        raise DataError("no scenes with target detections to draw")
    titles = ["clean image", "patched image", "clean disparity", "patched disparity"]
    fig, axes = plt.subplots(4, len(columns), figsize=(2.6 * len(columns), 7.5), squeeze=False)
    for col, panels in enumerate(columns):
        for row, panel in enumerate(panels):
            ax = axes[row][col]
            if panel.ndim == 3:
                ax.imshow(panel)
            else:
                ax.imshow(panel, cmap="magma", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if col == 0:
                ax.set_ylabel(titles[row], fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def generate_report(
    run_dir: str | Path,
    out_dir: str | Path,
    model: DepthModelHandle | None = None,
    dataset: Dataset | None = None,
) -> list[Path]:
    """Emit every chart the run's artifacts support."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    log_path = run_dir / "train_log.jsonl"
    if log_path.exists():
        written.append(plot_loss_curves(log_path, out_dir / "loss_curves.png"))
    report_path = run_dir / "eval_report.json"
    if report_path.exists():
        written.append(plot_metric_charts(report_path, out_dir / "metric_hist.png"))
    if model is not None and dataset is not None:
        from .data_io import load_patch

        patch = load_patch(run_dir)
        report = json.loads(report_path.read_text()) if report_path.exists() else {}
        cfg = EvalConfig(
            patch_scale_factor=report.get("config", {}).get("patch_scale_factor", 0.2),
            target_class=report.get("config", {}).get("target_class", 0),
        )
        written.append(
            plot_disparity_grid(model, dataset, patch.data, out_dir / "disparity_grid.png", cfg)
        )
    if not written:
        raise DataError(f"nothing to report: no artifacts under {run_dir}")
    return written
