"""Foundational value types and pixel algebra shared by the whole pipeline.

Images are float arrays of shape (H, W, 3) in [0, 1]; disparity maps are
(H, W) in [0, 1] with 1 = closest and 0 = farthest; binary masks are (H, W)
arrays whose values are exactly {0, 1} (stored as floats so they can enter
elementwise products without casts). Boxes are center-format with pixel
units. All value types are treated as immutable: operations return fresh
arrays and never write into their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import DataError

MaskDenominator = Literal["mask_area", "full_area"]


def clamp01(x: np.ndarray) -> np.ndarray:
    """Project pixel values onto [0, 1]. Idempotent."""
    return np.clip(x, 0.0, 1.0)


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate an (H, W, 3) image in [0, 1] and return it as float32."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"image must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"image must be at least 1x1, got {arr.shape}")
    arr = arr.astype(np.float32, copy=False)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError(
            f"image values outside [0, 1]: min={arr.min():.4g} max={arr.max():.4g}"
        )
    return arr


def check_disparity(disp: np.ndarray) -> np.ndarray:
    """Validate an (H, W) disparity map normalized to [0, 1]."""
    arr = np.asarray(disp)
    if arr.ndim != 2:
        raise DataError(f"disparity map must have shape (H, W), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError(
            f"disparity values outside [0, 1]: min={arr.min():.4g} max={arr.max():.4g}"
        )
    return arr


def check_mask(mask: np.ndarray) -> np.ndarray:
    """Validate an (H, W) strictly binary mask."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DataError(f"mask must have shape (H, W), got {arr.shape}")
    values = np.unique(arr)
    if not np.all(np.isin(values, (0, 1))):
        raise DataError(f"mask is not binary, found values {values[:8]}")
    return arr.astype(np.float32, copy=False)


def check_patch(patch: np.ndarray) -> np.ndarray:
    """Validate an (S, S, 3) square patch in [0, 1]."""
    arr = np.asarray(patch)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] != arr.shape[1]:
        raise DataError(f"patch must have shape (S, S, 3), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError("patch values outside [0, 1]")
    return arr


def _require_same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise DataError(f"shape mismatch: {sorted(shapes)}")


@dataclass(frozen=True)
class BBox:
    """Center-format detection box in pixel units with an objectness score."""

    cx: float
    cy: float
    w: float
    h: float
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise DataError(f"box sides must be positive, got w={self.w} h={self.h}")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def pixel_slices(self, image_shape: tuple[int, int]) -> tuple[slice, slice]:
        """Integer row/col slices of the box clipped to image bounds.

        Continuous coordinates are rounded outward-consistently: a pixel is
        inside when its index falls in [round(edge0), round(edge1)).
        """
        height, width = image_shape
        r0 = max(0, int(round(self.y0)))
        r1 = min(height, int(round(self.y1)))
        c0 = max(0, int(round(self.x0)))
        c1 = min(width, int(round(self.x1)))
        return slice(r0, r1), slice(c0, c1)

    def intersects_image(self, image_shape: tuple[int, int]) -> bool:
        rows, cols = self.pixel_slices(image_shape)
        return rows.stop > rows.start and cols.stop > cols.start


@dataclass(frozen=True)
class MaskPair:
    """Patch mask and focus mask derived from one detection.

    The patch mask marks where patch pixels replace the scene; the focus
    mask marks the whole detected object. The patch mask must be a subset
    of the focus mask.
    """

    patch_mask: np.ndarray
    focus_mask: np.ndarray
    source_box: BBox

    def __post_init__(self):
        check_mask(self.patch_mask)
        check_mask(self.focus_mask)
        _require_same_shape(self.patch_mask, self.focus_mask)
        require_subset(self.focus_mask, self.patch_mask)


@dataclass
class PatchState:
    """The optimized patch plus its Adam moments, step/epoch counters, the
    seed that initialized it, and the fingerprint of the config that owns it."""

    data: np.ndarray
    exp_avg: np.ndarray | None = None
    exp_avg_sq: np.ndarray | None = None
    step: int = 0
    epoch: int = 0
    seed: int = -1
    config_fingerprint: str = ""

    def __post_init__(self):
        self.data = check_patch(self.data).astype(np.float32)
        if self.exp_avg is None:
            self.exp_avg = np.zeros_like(self.data)
        if self.exp_avg_sq is None:
            self.exp_avg_sq = np.zeros_like(self.data)

    @property
    def side(self) -> int:
        return int(self.data.shape[0])


def require_subset(f: np.ndarray, p: np.ndarray) -> None:
    """Raise unless every set pixel of p is also set in f."""
    violations = (p > 0) & (f <= 0)
    if violations.any():
        row, col = np.argwhere(violations)[0]
        raise DataError(
            f"patch mask is not contained in focus mask, first violation at pixel ({row}, {col})"
        )


def mask_difference(f: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Set difference f - p of two binary masks with p contained in f."""
    f = check_mask(f)
    p = check_mask(p)
    _require_same_shape(f, p)
    require_subset(f, p)
    return (f - p).astype(np.float32)


def masked_mean_abs_diff(
    a: np.ndarray,
    b: np.ndarray,
    m: np.ndarray,
    denom: MaskDenominator = "mask_area",
) -> float:
    """Mean absolute difference of a and b restricted to mask m.

    The denominator is either the mask area or the full grid size; both
    appear in the pipeline (metrics normalize by mask area, the training
    losses by the full grid).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = check_mask(m).astype(np.float64)
    _require_same_shape(a, b, m)
    numerator = float(np.sum(np.abs(a - b) * m))
    if denom == "mask_area":
        area = float(m.sum())
        if area == 0:
            raise DataError("empty mask")
        return numerator / area
    if denom == "full_area":
        return numerator / float(m.size)
    raise DataError(f"unknown denominator mode {denom!r}")


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float image to 8-bit for display I/O."""
    return np.round(clamp01(image) * 255.0).astype(np.uint8)


def from_uint8(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32) / 255.0


def to_uint16(image: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float array to 16-bit; used for patches and disparity."""
    return np.round(clamp01(image) * 65535.0).astype(np.uint16)


def from_uint16(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32) / 65535.0
