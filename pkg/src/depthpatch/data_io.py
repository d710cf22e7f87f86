"""Dataset loading, corpus/patch/disparity persistence, run artifacts.

Images travel as 8-bit PNG; disparity maps and patches as 16-bit PNG (8-bit
visibly perturbs a trained patch and breaks resume tolerances). Disparity
sidecars record the raw model output range behind the [0, 1] normalization.
All writes are atomic (temp file + rename) so a crashed run never leaves a
half-written artifact visible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .core import PatchState, check_image, from_uint8, from_uint16, to_uint8, to_uint16
from .detector import (
    DetectionSet,
    DetectorBackend,
    DetectorConfig,
    OracleDetector,
    detect,
    save_annotations,
)
from .errors import DataError
from .scenes import SyntheticScene, corpus_boxes

logger = logging.getLogger(__name__)

KITTI_CLASS_MAP = {
    "Car": 0,
    "Van": 0,
    "Truck": 0,
    "Pedestrian": 1,
    "Person_sitting": 1,
    "Cyclist": 2,
}


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: str | Path, payload) -> None:
    atomic_write_bytes(path, json.dumps(payload, indent=2).encode())


def _encode_png(array: np.ndarray) -> bytes:
    if array.ndim == 3:
        array = array[:, :, ::-1]  # RGB -> BGR for the codec
    ok, buf = cv2.imencode(".png", array)
    if not ok:
        raise DataError(f"PNG encoding failed for array of shape {array.shape}")
    return buf.tobytes()


def _decode_png(data: bytes, path: Path) -> np.ndarray:
    array = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_UNCHANGED)
    if array is None:
        raise DataError(f"could not decode image file {path}")
    if array.ndim == 3:
        array = array[:, :, ::-1]
    return np.ascontiguousarray(array)


def save_image(path: str | Path, image: np.ndarray) -> None:
    atomic_write_bytes(path, _encode_png(to_uint8(check_image(image))))


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    array = _decode_png(path.read_bytes(), path)
    if array.dtype == np.uint16:
        return from_uint16(array)
    return from_uint8(array)


def save_disparity(path: str | Path, disparity: np.ndarray,
                   raw_range: tuple[float, float] = (0.0, 1.0)) -> None:
    """16-bit PNG plus a JSON sidecar recording the raw output range."""
    path = Path(path)
    atomic_write_bytes(path, _encode_png(to_uint16(disparity)))
    atomic_write_json(path.with_suffix(".json"), {
        "raw_min": raw_range[0],
        "raw_max": raw_range[1],
        "normalization": "per_image_minmax" if raw_range != (0.0, 1.0) else "identity",
    })


def load_disparity(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"disparity file not found: {path}")
    array = _decode_png(path.read_bytes(), path)
    sidecar_path = path.with_suffix(".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return from_uint16(array), sidecar


def save_patch(state: PatchState, out_dir: str | Path) -> Path:
    """Persist a patch as 16-bit PNG plus a manifest with an integrity hash."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png_bytes = _encode_png(to_uint16(state.data))
    atomic_write_bytes(out_dir / "patch.png", png_bytes)
    manifest = {
        "side": int(state.data.shape[0]),
        "seed": state.seed,
        "epoch": state.epoch,
        "config_fingerprint": state.config_fingerprint,
        "png_sha256": hashlib.sha256(png_bytes).hexdigest(),
    }
    atomic_write_json(out_dir / "patch.json", manifest)
    return out_dir


def load_patch(patch_dir: str | Path) -> PatchState:
    """Round-trip load; refuses a PNG whose hash disagrees with the manifest."""
    patch_dir = Path(patch_dir)
    manifest_path = patch_dir / "patch.json"
    png_path = patch_dir / "patch.png"
    if not manifest_path.exists() or not png_path.exists():
        raise DataError(f"no patch artifacts (patch.png + patch.json) under {patch_dir}")
    manifest = json.loads(manifest_path.read_text())
    png_bytes = png_path.read_bytes()
    if hashlib.sha256(png_bytes).hexdigest() != manifest["png_sha256"]:
        raise DataError(f"patch PNG at {png_path} does not match its manifest hash")
    data = from_uint16(_decode_png(png_bytes, png_path))
    return PatchState(
        data=data.astype(np.float32),
        epoch=int(manifest.get("epoch", 0)),
        seed=int(manifest.get("seed", -1)),
        config_fingerprint=str(manifest.get("config_fingerprint", "")),
    )


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    split: str
    image_ids: tuple[str, ...]
    annotations: str
    content_hash: str


@dataclass
class SceneRecord:
    image_id: str
    image: np.ndarray
    detections: DetectionSet
    true_disparity: np.ndarray | None = None


@dataclass
class Dataset:
    manifest: DatasetManifest
    records: list[SceneRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, index: int) -> SceneRecord:
        return self.records[index]


def _content_hash(image_ids: Sequence[str], annotation_bytes: bytes) -> str:
    digest = hashlib.sha256()
    for image_id in image_ids:
        digest.update(image_id.encode())
        digest.update(b"\0")
    digest.update(annotation_bytes)
    return digest.hexdigest()


def _resolve_split_dir(root: str | Path, split: str) -> Path:
    root = Path(root)
    if (root / split / "images").is_dir():
        return root / split
    if (root / "images").is_dir():
        return root
    raise DataError(f"no images/ directory under {root} or {root / split}")


def load_dataset(
    root: str | Path,
    split: str = "train",
    detector_cfg: DetectorConfig | None = None,
    backend: DetectorBackend | None = None,
    annotations_path: str | Path | None = None,
) -> Dataset:
    """Load a corpus directory into memory with cached detections.

    Iteration order is sorted image ids. Detection runs once per image here,
    not during optimization. With no explicit backend, the oracle detector
    reads the split's annotations file.
    """
    detector_cfg = detector_cfg or DetectorConfig()
    split_dir = _resolve_split_dir(root, split)
    image_dir = split_dir / "images"
    image_ids = sorted(p.stem for p in image_dir.glob("*.png"))
    if not image_ids:
        raise DataError(f"no PNG images under {image_dir}")
    annotations = Path(annotations_path) if annotations_path else split_dir / "annotations.json"
    annotation_bytes = annotations.read_bytes() if annotations.exists() else b""
    if backend is None:
        if not annotations.exists():
            raise DataError(f"no annotations file at {annotations} and no detector backend given")
        backend = OracleDetector(annotations)
    records = []
    for image_id in image_ids:
        image = load_image(image_dir / f"{image_id}.png")
        detections = detect(image, detector_cfg, backend, image_id)
        disparity = None
        disparity_path = split_dir / "disparity" / f"{image_id}.png"
        if disparity_path.exists():
            disparity, _ = load_disparity(disparity_path)
        records.append(SceneRecord(image_id, image, detections, disparity))
    manifest = DatasetManifest(
        root=str(root),
        split=split,
        image_ids=tuple(image_ids),
        annotations=str(annotations),
        content_hash=_content_hash(image_ids, annotation_bytes),
    )
    return Dataset(manifest=manifest, records=records)


def save_scene_corpus(scenes: Sequence[SyntheticScene], root: str | Path,
                      split: str = "train") -> Path:
    """Write a synthetic corpus in the canonical dataset layout."""
    split_dir = Path(root) / split
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    (split_dir / "disparity").mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        if not scene.scene_id:
            raise DataError("scene_id is required to persist a corpus")
        save_image(split_dir / "images" / f"{scene.scene_id}.png", scene.image)
        save_disparity(split_dir / "disparity" / f"{scene.scene_id}.png", scene.true_disparity)
    save_annotations(corpus_boxes(scenes), split_dir / "annotations.json")
    return split_dir


def dataset_from_scenes(
    scenes: Sequence[SyntheticScene],
    detector_cfg: DetectorConfig | None = None,
) -> Dataset:
    """In-memory dataset over generated scenes (no disk round-trip)."""
    detector_cfg = detector_cfg or DetectorConfig()
    backend = OracleDetector(corpus_boxes(scenes))
    ordered = sorted(scenes, key=lambda s: s.scene_id)
    records = [
        SceneRecord(
            image_id=scene.scene_id,
            image=scene.image,
            detections=detect(scene.image, detector_cfg, backend, scene.scene_id),
            true_disparity=scene.true_disparity,
        )
        for scene in ordered
    ]
    ids = tuple(r.image_id for r in records)
    annotation_bytes = json.dumps(
        {s.scene_id: [[b.cx, b.cy, b.w, b.h, b.score, b.class_id] for b in s.objects]
         for s in ordered},
        sort_keys=True,
    ).encode()
    manifest = DatasetManifest(
        root="<memory>",
        split="train",
        image_ids=ids,
        annotations="<memory>",
        content_hash=_content_hash(ids, annotation_bytes),
    )
    return Dataset(manifest=manifest, records=records)


def convert_kitti_annotations(
    labels_dir: str | Path,
    out_path: str | Path,
    class_map: dict[str, int] | None = None,
) -> int:
    """Convert KITTI label .txt files into the canonical annotations JSON.

    Returns the number of converted boxes. Types absent from the class map
    (DontCare, Misc, ...) are skipped.
    """
    class_map = class_map or KITTI_CLASS_MAP
    labels_dir = Path(labels_dir)
    files = sorted(labels_dir.glob("*.txt"))
    if not files:
        raise DataError(f"no KITTI label files (*.txt) under {labels_dir}")
    rows = []
    for label_file in files:
        for line_no, line in enumerate(label_file.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) < 15:
                raise DataError(
                    f"malformed KITTI label {label_file.name}:{line_no}: "
                    f"expected >= 15 fields, got {len(parts)}"
                )
            obj_type = parts[0]
            if obj_type not in class_map:
                continue
            try:
                left, top, right, bottom = (float(v) for v in parts[4:8])
                score = float(parts[15]) if len(parts) >= 16 else 1.0
            except ValueError as exc:
                raise DataError(
                    f"malformed KITTI label {label_file.name}:{line_no}: {exc}"
                ) from exc
            rows.append({
                "image_id": label_file.stem,
                "class_id": class_map[obj_type],
                "cx": (left + right) / 2.0,
                "cy": (top + bottom) / 2.0,
                "w": right - left,
                "h": bottom - top,
                "score": score,
            })
    atomic_write_json(out_path, rows)
    return len(rows)


def read_jsonl(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]
