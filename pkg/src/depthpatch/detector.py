"""Detection front-end that seeds patch placement.

Boxes can come from a JSON annotations file (the oracle backend, default
for tests and synthetic corpora) or from any registered neural detector
adapter. Post-processing is fixed: objectness threshold, class filter,
greedy same-class NMS, then a top-score cap on the number of detections.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .core import BBox
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectorConfig:
    objectness_threshold: float = 0.5
    nms_iou_threshold: float = 0.4
    max_detections: int = 14
    target_class: int | None = None  # None keeps every class

    def __post_init__(self):
        for name in ("objectness_threshold", "nms_iou_threshold"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if self.max_detections < 1:
            raise ConfigError(f"max_detections must be >= 1, got {self.max_detections}")


@dataclass(frozen=True)
class DetectionSet:
    image_id: str
    boxes: tuple[BBox, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two center-format boxes."""
    ix0 = max(a.x0, b.x0)
    iy0 = max(a.y0, b.y0)
    ix1 = min(a.x1, b.x1)
    iy1 = min(a.y1, b.y1)
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def nms(boxes: list[BBox], iou_threshold: float) -> list[BBox]:
    """Greedy non-max suppression, descending score, same-class only.

    Ties in score are broken by input order so the result is deterministic.
    """
    for box in boxes:
        if not np.isfinite(box.score):
            raise DataError(f"non-finite score in box {box}")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[BBox] = []
    for i in order:
        candidate = boxes[i]
        if all(
            kept_box.class_id != candidate.class_id
            or iou(kept_box, candidate) <= iou_threshold
            for kept_box in kept
        ):
            kept.append(candidate)
    return kept


class DetectorBackend(Protocol):
    """Produces raw candidate boxes for one image; post-processing is shared."""

    def propose(self, image: np.ndarray, image_id: str) -> list[BBox]: ...


class OracleDetector:
    """Reads ground-truth boxes from an annotations mapping or JSON file.

    The file is a JSON array of rows {image_id, class_id, cx, cy, w, h,
    score} in pixel units. Stateless after construction and thread-safe.
    """

    def __init__(self, annotations: str | Path | dict[str, list[BBox]]):
        if isinstance(annotations, (str, Path)):
            self._by_image = load_annotations(annotations)
        else:
            self._by_image = {k: list(v) for k, v in annotations.items()}

    def propose(self, image: np.ndarray, image_id: str) -> list[BBox]:
        if image_id not in self._by_image:
            logger.warning("no annotations for image %r, returning empty set", image_id)
            return []
        return list(self._by_image[image_id])


def load_annotations(path: str | Path) -> dict[str, list[BBox]]:
    """Parse the canonical annotations JSON into per-image box lists."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"annotations file not found: {path}")
    try:
        rows = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed annotations file {path}: {exc}") from exc
    by_image: dict[str, list[BBox]] = {}
    for i, row in enumerate(rows):
        try:
            box = BBox(
                cx=float(row["cx"]),
                cy=float(row["cy"]),
                w=float(row["w"]),
                h=float(row["h"]),
                score=float(row.get("score", 1.0)),
                class_id=int(row["class_id"]),
            )
            by_image.setdefault(str(row["image_id"]), []).append(box)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed annotation row {i} in {path}: {exc}") from exc
    return by_image


def save_annotations(by_image: dict[str, list[BBox]], path: str | Path) -> None:
    rows = [
        {
            "image_id": image_id,
            "class_id": box.class_id,
            "cx": box.cx,
            "cy": box.cy,
            "w": box.w,
            "h": box.h,
            "score": box.score,
        }
        for image_id in sorted(by_image)
        for box in by_image[image_id]
    ]
    Path(path).write_text(json.dumps(rows, indent=2))


_DETECTOR_REGISTRY: dict[str, Callable[..., DetectorBackend]] = {}


def register_detector(name: str, factory: Callable[..., DetectorBackend]) -> None:
    """Register an adapter for an external pretrained detector."""
    _DETECTOR_REGISTRY[name] = factory


def create_detector(name: str, **kwargs) -> DetectorBackend:
    if name not in _DETECTOR_REGISTRY:
        raise ConfigError(
            f"no detector backend registered under {name!r}; "
            f"known: {sorted(_DETECTOR_REGISTRY) or 'none'}"
        )
    return _DETECTOR_REGISTRY[name](**kwargs)


register_detector("oracle", OracleDetector)


def detect(
    image: np.ndarray,
    cfg: DetectorConfig,
    backend: DetectorBackend | None,
    image_id: str = "",
) -> DetectionSet:
    """Run the backend on one image and apply the shared post-processing."""
    if backend is None:
        raise ConfigError("no detector backend configured (oracle file or adapter)")
    candidates = backend.propose(image, image_id)
    candidates = [b for b in candidates if b.score >= cfg.objectness_threshold]
    if cfg.target_class is not None:
        candidates = [b for b in candidates if b.class_id == cfg.target_class]
    kept = nms(candidates, cfg.nms_iou_threshold)
    kept = kept[: cfg.max_detections]
    return DetectionSet(image_id=image_id, boxes=tuple(kept))
