"""Command-line surface: corpus generation, training, evaluation, experiments.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
failure. Every option can also be set through environment variables with
the DEPTHPATCH_ prefix (e.g. DEPTHPATCH_TRAIN_PATCH_SEED).
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import data_io, experiments, metrics, models, report as report_mod, scenes, trainer
from .config import AttackConfig, apply_overrides, config_to_dict, load_config
from .detector import DetectorConfig, create_detector
from .errors import DataError, DepthPatchError
from .transforms import TransformConfig

logger = logging.getLogger(__name__)

_IDENTITY_TRANSFORMS = {
    "rotation_deg": [0.0, 0.0],
    "scale_jitter": [1.0, 1.0],
    "noise": [0.0, 0.0],
    "contrast": [1.0, 1.0],
    "brightness": [0.0, 0.0],
}


@click.group(context_settings={"auto_envvar_prefix": "DEPTHPATCH"})
@click.option("--verbose", is_flag=True, help="Enable debug logging.")
def cli(verbose: bool):
    """Adversarial patches against monocular depth estimation, desk scale."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load_attack_config(config_path, seed, freeze_transforms) -> AttackConfig:
    cfg = load_config(config_path) if config_path else AttackConfig()
    overrides: dict = {}
    if seed is not None:
        overrides["seed"] = seed
    if freeze_transforms:
        overrides["transforms"] = _IDENTITY_TRANSFORMS
    return apply_overrides(cfg, overrides) if overrides else cfg


def _open_dataset(dataset, split, detector_cfg, annotations, detector_name):
    backend = None
    if detector_name and detector_name != "oracle":
        backend = create_detector(detector_name)
    return data_io.load_dataset(
        dataset, split, detector_cfg=detector_cfg, backend=backend,
        annotations_path=annotations,
    )


@cli.command("gen-scenes")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--count", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--split", default="train", show_default=True)
@click.option("--height", default=48, show_default=True)
@click.option("--width", default=96, show_default=True)
@click.option("--min-objects", default=1, show_default=True)
@click.option("--max-objects", default=2, show_default=True)
@click.option("--classes", default="0,1", show_default=True,
              help="Comma-separated class ids to place (0 car, 1 pedestrian).")
def gen_scenes_cmd(out, count, seed, split, height, width, min_objects, max_objects, classes):
    """Render a synthetic corpus with ground-truth disparity and boxes."""
    spec = scenes.SceneSpec(
        height=height,
        width=width,
        min_objects=min_objects,
        max_objects=max_objects,
        classes=tuple(int(c) for c in classes.split(",") if c.strip() != ""),
    )
    corpus = scenes.generate_corpus(seed, count, spec)
    split_dir = data_io.save_scene_corpus(corpus, out, split)
    click.echo(f"wrote {count} scenes to {split_dir}")


@cli.command("train-model")
@click.option("--dataset", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--split", default="train", show_default=True)
@click.option("--val-split", default=None, help="Optional split for held-out error.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--epochs", default=40, show_default=True)
@click.option("--lr", default=2e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
def train_model_cmd(dataset, split, val_split, out, epochs, lr, seed):
    """Fit the bundled toy depth model on a corpus with disparity ground truth."""
    ds = data_io.load_dataset(dataset, split)
    if any(r.true_disparity is None for r in ds):
        raise DataError(f"dataset {dataset}/{split} lacks disparity maps; cannot train")
    handle, history = models.train_toy_model(list(ds), epochs=epochs, lr=lr, seed=seed)
    models.save_model(handle, out)
    click.echo(f"saved model to {out} (final train L1 {history[-1]:.4f})" if history
               else f"saved untrained model to {out}")
    if val_split:
        val = data_io.load_dataset(dataset, val_split)
        if any(r.true_disparity is None for r in val):
            raise DataError(f"validation split {val_split} lacks disparity maps")
        mae = models.evaluate_model(handle, list(val))
        click.echo(f"held-out mean abs disparity error: {mae:.4f}")


@cli.command("train-patch")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
@click.option("--model", "model_spec", required=True)
@click.option("--dataset", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--split", default="train", show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--resume", is_flag=True, help="Continue from the latest checkpoint in --out.")
@click.option("--freeze-transforms", is_flag=True,
              help="Collapse all transform ranges to identity (debugging).")
@click.option("--annotations", type=click.Path(exists=True, path_type=Path),
              help="Oracle annotations file overriding the dataset default.")
@click.option("--detector", "detector_name", default="oracle", show_default=True)
def train_patch_cmd(config_path, model_spec, dataset, split, out, seed, resume,
                    freeze_transforms, annotations, detector_name):
    """Optimize an adversarial patch against a frozen depth model."""
    cfg = _load_attack_config(config_path, seed, freeze_transforms)
    model = models.resolve_model(model_spec)
    ds = _open_dataset(dataset, split, cfg.detector, annotations, detector_name)
    patch, run_report = trainer.run_attack(ds, model, cfg, out_dir=out, resume=resume)
    agg = run_report["metrics"]
    click.echo(
        f"finished {run_report['epochs']} epochs: "
        f"E_d {agg['e_d']:.4f}  R_a {agg['r_a']:.4f}  MSE {agg['mse']:.4f}"
    )
    click.echo(f"patch and report written under {out}")


@cli.command("evaluate")
@click.option("--patch", "patch_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--model", "model_spec", required=True)
@click.option("--dataset", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--split", default="test", show_default=True)
@click.option("--report", "report_path", required=True, type=click.Path(path_type=Path))
@click.option("--csv", "csv_path", type=click.Path(path_type=Path), help="Optional CSV export.")
@click.option("--patch-scale", default=None, type=float,
              help="Patch scale factor (defaults to the run config next to the patch).")
@click.option("--target-class", default=None, type=int)
@click.option("--transform-mode", type=click.Choice(["identity", "sampled"]), default="identity",
              show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--annotations", type=click.Path(exists=True, path_type=Path))
@click.option("--detector", "detector_name", default="oracle", show_default=True)
def evaluate_cmd(patch_dir, model_spec, dataset, split, report_path, csv_path, patch_scale,
                 target_class, transform_mode, seed, annotations, detector_name):
    """Measure a patch's effect (E_d, R_a, MSE) over a dataset."""
    patch_state = data_io.load_patch(patch_dir)
    run_config = Path(patch_dir) / "config.yaml"
    defaults = {}
    if run_config.exists():
        defaults = config_to_dict(load_config(run_config))
    scale = patch_scale if patch_scale is not None else defaults.get("patch_scale_factor", 0.2)
    klass = target_class if target_class is not None else defaults.get("target_class", 0)
    model = models.resolve_model(model_spec)
    ds = _open_dataset(dataset, split, DetectorConfig(), annotations, detector_name)
    eval_cfg = metrics.EvalConfig(
        patch_scale_factor=scale,
        target_class=klass,
        transform_mode=transform_mode,
        transforms=TransformConfig(),
        seed=seed,
    )
    records, aggregate = metrics.evaluate_run(patch_state.data, ds, model, eval_cfg)
    payload = {
        "patch": str(patch_dir),
        "model_checksum": model.checksum(),
        "dataset_hash": ds.manifest.content_hash,
        "eval": {
            "patch_scale_factor": scale,
            "target_class": klass,
            "transform_mode": transform_mode,
            "seed": seed,
        },
        "aggregate": aggregate,
        "records": [r.as_dict() for r in records],
    }
    data_io.atomic_write_json(report_path, payload)
    if csv_path:
        lines = ["image_id,e_d,r_a,mse,mask_area"]
        lines += [
            f"{r.image_id},{r.e_d:.6f},{r.r_a:.6f},{r.mse:.6f},{r.mask_area}" for r in records
        ]
        data_io.atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode())
    click.echo(
        f"evaluated {aggregate['scenes']} scenes: "
        f"E_d {aggregate['e_d']:.4f}  R_a {aggregate['r_a']:.4f}  MSE {aggregate['mse']:.4f}"
    )


def _experiment_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))(fn)
    fn = click.option("--model", "model_spec", required=True)(fn)
    fn = click.option("--dataset", required=True, type=click.Path(exists=True, path_type=Path))(fn)
    fn = click.option("--split", default="train", show_default=True)(fn)
    fn = click.option("--out", required=True, type=click.Path(path_type=Path))(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--workers", default=0, show_default=True,
                      help="Opt-in parallel variants (one process each).")(fn)
    return fn


@cli.command("ablate")
@_experiment_options
def ablate_cmd(config_path, model_spec, dataset, split, out, seed, workers):
    """Train one patch per loss-term combination and tabulate E_d / R_a."""
    cfg = _load_attack_config(config_path, seed, False)
    model = models.resolve_model(model_spec)
    ds = data_io.load_dataset(dataset, split, detector_cfg=cfg.detector)
    table = experiments.ablate(
        cfg, model, ds, out, workers=workers,
        model_dir=model_spec if Path(model_spec).is_dir() else None,
        dataset_root=dataset, split=split,
    )
    click.echo(experiments.render_markdown(table))


@cli.command("sweep")
@_experiment_options
@click.option("--scales", default="0.1,0.2,0.3", show_default=True)
def sweep_cmd(config_path, model_spec, dataset, split, out, seed, workers, scales):
    """Train one patch per patch-scale factor and tabulate E_d / R_a."""
    cfg = _load_attack_config(config_path, seed, False)
    model = models.resolve_model(model_spec)
    ds = data_io.load_dataset(dataset, split, detector_cfg=cfg.detector)
    scale_values = tuple(float(s) for s in scales.split(","))
    table = experiments.sweep_scale(
        cfg, model, ds, out, scales=scale_values, workers=workers,
        model_dir=model_spec if Path(model_spec).is_dir() else None,
        dataset_root=dataset, split=split,
    )
    click.echo(experiments.render_markdown(table))


@cli.command("report")
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--plot", is_flag=True, help="Emit PNG charts alongside the summary.")
@click.option("--model", "model_spec", default=None,
              help="With --dataset, also draws before/after disparity grids.")
@click.option("--dataset", default=None, type=click.Path(exists=True, path_type=Path))
@click.option("--split", default="train", show_default=True)
def report_cmd(run_dir, out, plot, model_spec, dataset, split):
    """Summarize a finished run; with --plot, emit charts."""
    eval_path = Path(run_dir) / "eval_report.json"
    if eval_path.exists():
        payload = json.loads(eval_path.read_text())
        agg = payload.get("metrics") or payload.get("aggregate") or {}
        click.echo(
            f"run {run_dir}: E_d {agg.get('e_d', float('nan')):.4f}  "
            f"R_a {agg.get('r_a', float('nan')):.4f}  MSE {agg.get('mse', float('nan')):.4f}"
        )
    if plot:
        model = models.resolve_model(model_spec) if model_spec else None
        ds = data_io.load_dataset(dataset, split) if dataset else None
        written = report_mod.generate_report(run_dir, out, model, ds)
        for path in written:
            click.echo(f"wrote {path}")


@cli.command("convert-annotations")
@click.option("--labels", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--class-map", "class_map_json", default=None,
              help='JSON object mapping KITTI types to class ids, e.g. {"Car": 0}.')
def convert_annotations_cmd(labels, out, class_map_json):
    """Convert KITTI label files to the canonical annotations JSON."""
    class_map = json.loads(class_map_json) if class_map_json else None
    count = data_io.convert_kitti_annotations(labels, out, class_map)
    click.echo(f"converted {count} boxes to {out}")


def main(argv=None) -> int:
    try:
        result = cli.main(args=argv, standalone_mode=False)
        return int(result) if isinstance(result, int) else 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return 2
    except DepthPatchError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
