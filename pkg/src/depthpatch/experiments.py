"""Multi-run experiments: loss-term ablation and patch-scale sweep.

Every variant trains its own patch under the same seed, dataset, and
victim, then gets evaluated with identity placement. Tables carry the
dataset hash, seed, and model checksum in their header and are emitted as
both JSON and markdown; a failed variant aborts the experiment but the
partial table is saved first. Output files contain no timestamps so a
re-run reproduces them bit-identically.
"""

from __future__ import annotations

import logging
from concurrent import futures
from dataclasses import dataclass, field
from pathlib import Path

from .config import AttackConfig, apply_overrides, config_from_dict, config_to_dict
from .data_io import Dataset, atomic_write_bytes, atomic_write_json, load_dataset
from .errors import ConfigError, TrainingError
from .metrics import EvalConfig, evaluate_run
from .models import DepthModelHandle, load_model
from .trainer import run_attack

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentSpec:
    base: AttackConfig
    variants: tuple[tuple[str, dict], ...]
    title: str = "experiment"

    def __post_init__(self):
        names = [name for name, _ in self.variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"variant names must be unique, got {names}")
        for name, overrides in self.variants:
            apply_overrides(self.base, overrides)  # validates eagerly


def ablation_spec(base: AttackConfig) -> ExperimentSpec:
    """The three loss-term combinations: ring-only, covered-only, full."""
    return ExperimentSpec(
        base=base,
        variants=(
            ("d2_tv", {"loss_weights": {"use_d1": False, "use_d2": True}}),
            ("d1_tv", {"loss_weights": {"use_d1": True, "use_d2": False}}),
            ("d1sq_d2_tv", {"loss_weights": {"use_d1": True, "use_d2": True}}),
        ),
        title="loss ablation",
    )


def scale_sweep_spec(base: AttackConfig, scales: tuple[float, ...] = (0.1, 0.2, 0.3)) -> ExperimentSpec:
    if list(scales) != sorted(scales) or any(not 0 < s < 1 for s in scales):
        raise ConfigError(f"scales must be ascending and inside (0, 1), got {scales}")
    return ExperimentSpec(
        base=base,
        variants=tuple(
            (f"scale_{s:g}", {"patch_scale_factor": s}) for s in scales
        ),
        title="patch scale sweep",
    )


def _evaluate_variant(
    name: str,
    cfg: AttackConfig,
    model: DepthModelHandle,
    dataset: Dataset,
    out_dir: Path,
) -> dict:
    patch, report = run_attack(dataset, model, cfg, out_dir=out_dir)
    metrics = report["metrics"]
    return {
        "name": name,
        "e_d": metrics["e_d"],
        "r_a": metrics["r_a"],
        "mse": metrics["mse"],
        "scenes": metrics["scenes"],
    }


def _variant_worker(args: tuple) -> dict:
    """Process-pool entry: reloads model/dataset from disk per variant."""
    name, cfg_dict, model_dir, dataset_root, split, out_dir = args
    cfg = config_from_dict(cfg_dict)
    model = load_model(model_dir)
    dataset = load_dataset(dataset_root, split, detector_cfg=cfg.detector)
    return _evaluate_variant(name, cfg, model, dataset, Path(out_dir))


def render_markdown(table: dict) -> str:
    header = table["header"]
    lines = [
        f"# {header['title']}",
        "",
        f"- dataset_hash: `{header['dataset_hash']}`",
        f"- seed: {header['seed']}",
        f"- model_checksum: `{header['model_checksum']}`",
        "",
        "| variant | E_d | R_a | MSE |",
        "|---|---|---|---|",
    ]
    for row in table["rows"]:
        lines.append(
            f"| {row['name']} | {row['e_d']:.6f} | {row['r_a']:.6f} | {row['mse']:.6f} |"
        )
    if "e_d_monotonic" in table:
        lines.append("")
        lines.append(f"E_d non-decreasing across variants: {table['e_d_monotonic']}")
    return "\n".join(lines) + "\n"


def _save_table(table: dict, out_dir: Path) -> None:
    atomic_write_json(out_dir / "experiment.json", table)
    atomic_write_bytes(out_dir / "experiment.md", render_markdown(table).encode())


def run_experiment(
    spec: ExperimentSpec,
    model: DepthModelHandle,
    dataset: Dataset,
    out_dir: str | Path,
    workers: int = 0,
    model_dir: str | Path | None = None,
    dataset_root: str | Path | None = None,
    split: str = "train",
    mark_monotonic: bool = False,
) -> dict:
    """Train and evaluate every variant; returns (and persists) the table.

    Variants run sequentially unless `workers` > 1, in which case model and
    dataset paths are required so isolated worker processes can reload them.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    configs = [(name, apply_overrides(spec.base, overrides)) for name, overrides in spec.variants]
    table: dict = {
        "header": {
            "title": spec.title,
            "dataset_hash": dataset.manifest.content_hash,
            "seed": spec.base.seed,
            "model_checksum": model.checksum(),
        },
        "rows": [],
        "variants": {name: overrides for name, overrides in spec.variants},
    }
    try:
        if workers > 1:
            if model_dir is None or dataset_root is None:
                raise ConfigError("parallel experiments need --model and --dataset paths on disk")
            jobs = [
                (name, config_to_dict(cfg), str(model_dir), str(dataset_root), split,
                 str(out_dir / "variants" / name))
                for name, cfg in configs
            ]
            with futures.ProcessPoolExecutor(max_workers=workers) as pool:
                table["rows"] = list(pool.map(_variant_worker, jobs))
        else:
            for name, cfg in configs:
                logger.info("running variant %r", name)
                table["rows"].append(
                    _evaluate_variant(name, cfg, model, dataset, out_dir / "variants" / name)
                )
    except Exception as exc:
        table["aborted"] = f"{type(exc).__name__}: {exc}"
        _save_table(table, out_dir)
        raise TrainingError(
            f"experiment aborted after {len(table['rows'])}/{len(configs)} variants: {exc}"
        ) from exc
    if mark_monotonic:
        e_ds = [row["e_d"] for row in table["rows"]]
        table["e_d_monotonic"] = all(b >= a for a, b in zip(e_ds, e_ds[1:]))
    _save_table(table, out_dir)
    return table


def ablate(base: AttackConfig, model, dataset, out_dir, **kwargs) -> dict:
    return run_experiment(ablation_spec(base), model, dataset, out_dir, **kwargs)


def sweep_scale(
    base: AttackConfig, model, dataset, out_dir, scales=(0.1, 0.2, 0.3), **kwargs
) -> dict:
    spec = scale_sweep_spec(base, tuple(scales))
    return run_experiment(spec, model, dataset, out_dir, mark_monotonic=True, **kwargs)
