"""Differentiable patch placement and masked composition.

`place_patch` warps the square patch onto the scene (scale anchored to the
detection box, rotation about the patch center, bilinear resampling so
gradients reach the patch pixels) and returns the binary footprint mask.
`compose` blends the warped canvas into the scene through that mask; the
output is bit-identical to the clean image wherever the mask is zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .core import BBox, MaskPair
from .detector import DetectionSet
from .errors import DataError
from .transforms import TransformConfig, TransformSample, apply_photometric, sample_transform

logger = logging.getLogger(__name__)


def _bilinear_sample(patch: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample an (S, S, 3) patch at continuous coords with border padding.

    `u`/`v` are column/row coordinates in the continuous patch frame where
    pixel (i, j) is centered at (j + 0.5, i + 0.5).
    """
    side = patch.shape[0]
    fu = u - 0.5
    fv = v - 0.5
    u0 = torch.floor(fu)
    v0 = torch.floor(fv)
    wu = (fu - u0).unsqueeze(-1)
    wv = (fv - v0).unsqueeze(-1)
    u0 = u0.long()
    v0 = v0.long()
    u0c = u0.clamp(0, side - 1)
    u1c = (u0 + 1).clamp(0, side - 1)
    v0c = v0.clamp(0, side - 1)
    v1c = (v0 + 1).clamp(0, side - 1)
    top = (1 - wu) * patch[v0c, u0c] + wu * patch[v0c, u1c]
    bottom = (1 - wu) * patch[v1c, u0c] + wu * patch[v1c, u1c]
    return (1 - wv) * top + wv * bottom


def place_patch(
    patch: torch.Tensor,
    box: BBox,
    t: TransformSample,
    image_shape: tuple[int, int],
    patch_scale_factor: float = 0.2,
) -> tuple[torch.Tensor, torch.Tensor] | None:
    """Warp the patch onto an image-sized canvas centered on the box.

    The rendered side is `patch_scale_factor * max(box.w, box.h) * t.scale`,
    snapped to whole pixels so an axis-aligned paste fully inside bounds
    covers exactly `round(side)**2` pixels. The footprint mask is the
    warped square (half-open pixel-center containment) clipped to image
    bounds, kept binary and detached so gradients only flow through patch
    values. Returns None for degenerate footprints under 2x2 pixels.
    """
    height, width = image_shape
    side_px = patch_scale_factor * max(box.w, box.h) * t.scale
    rendered = float(round(side_px))
    if rendered < 2.0:
        logger.warning(
            "skipping detection at (%.1f, %.1f): rendered patch side %.2f px is degenerate",
            box.cx, box.cy, side_px,
        )
        return None
    dtype = patch.dtype
    theta = math.radians(t.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    source = patch
    if rendered < patch.shape[0]:
        # Minification: area-average down to the rendered resolution first so
        # every patch pixel keeps a gradient path (point sampling would skip
        # most of them and alias besides).
        target = int(rendered)
        source = (
            F.adaptive_avg_pool2d(patch.permute(2, 0, 1).unsqueeze(0), (target, target))
            .squeeze(0)
            .permute(1, 2, 0)
        )
    side = source.shape[0]
    zoom = side / rendered

    ys = torch.arange(height, dtype=dtype) + 0.5 - box.cy
    xs = torch.arange(width, dtype=dtype) + 0.5 - box.cx
    dy, dx = torch.meshgrid(ys, xs, indexing="ij")
    # Inverse rotation maps canvas offsets back into the unrotated patch frame.
    px = cos_t * dx + sin_t * dy
    py = -sin_t * dx + cos_t * dy
    u = px * zoom + side / 2.0
    v = py * zoom + side / 2.0

    canvas = _bilinear_sample(source, u, v)

    half = rendered / 2.0
    inside = (px >= -half) & (px < half) & (py >= -half) & (py < half)
    mask = inside.to(torch.float32).detach()
    if float(mask.sum()) < 4.0:
        logger.warning(
            "skipping detection at (%.1f, %.1f): visible footprint under 2x2 pixels",
            box.cx, box.cy,
        )
        return None
    return canvas, mask


def _box_inside(box: BBox, image_shape: tuple[int, int]) -> torch.Tensor:
    """Boolean grid of pixels inside the clipped box rectangle."""
    height, width = image_shape
    rows, cols = box.pixel_slices(image_shape)
    grid = torch.zeros(height, width, dtype=torch.bool)
    grid[rows, cols] = True
    return grid


def build_focus_mask(box: BBox, image_shape: tuple[int, int]) -> np.ndarray:
    """Binary mask of the detection rectangle clipped to image bounds."""
    if not box.intersects_image(image_shape):
        raise DataError(f"box {box} does not intersect image of shape {image_shape}")
    mask = np.zeros(image_shape, dtype=np.float32)
    rows, cols = box.pixel_slices(image_shape)
    mask[rows, cols] = 1.0
    return mask


def compose(image: torch.Tensor, canvas: torch.Tensor, patch_mask: torch.Tensor) -> torch.Tensor:
    """Masked blend: canvas where the mask is set, untouched image elsewhere.

    Implemented with `torch.where` so unmasked pixels are bit-identical to
    the input image and the gradient w.r.t. the canvas is exactly the mask.
    """
    if image.shape[:2] != canvas.shape[:2] or image.shape[:2] != patch_mask.shape:
        raise DataError(
            f"shape mismatch: image {tuple(image.shape)}, canvas {tuple(canvas.shape)}, "
            f"mask {tuple(patch_mask.shape)}"
        )
    return torch.where(patch_mask.unsqueeze(-1) > 0.5, canvas, image)


@dataclass
class CompositeScene:
    """One adversarial example: patched image plus per-detection masks."""

    image: torch.Tensor
    patch_masks: list[torch.Tensor] = field(default_factory=list)
    focus_masks: list[torch.Tensor] = field(default_factory=list)
    boxes: list[BBox] = field(default_factory=list)
    provenance: list[TransformSample] = field(default_factory=list)
    # index of each pasted detection in the input DetectionSet (skips excluded)
    indices: list[int] = field(default_factory=list)

    def mask_pairs(self) -> list[MaskPair]:
        return [
            MaskPair(
                patch_mask=pm.numpy().astype(np.float32),
                focus_mask=fm.cpu().numpy().astype(np.float32),
                source_box=box,
            )
            for pm, fm, box in zip(self.patch_masks, self.focus_masks, self.boxes)
        ]


def compose_scene(
    image: torch.Tensor,
    patch: torch.Tensor,
    detections: DetectionSet,
    transform_cfg: TransformConfig,
    patch_scale_factor: float = 0.2,
    seeds: list[int] | None = None,
    freeze_transforms: bool = False,
) -> CompositeScene:
    """Paste the patch onto every detection of one scene.

    Detections are pasted in ascending score order so the highest-scoring
    one wins overlaps. `seeds` supplies one transform seed per detection;
    omitted or frozen, the identity transform is used. Footprints are
    intersected with the detection rectangle so the patch stays on the
    object and every patch mask is contained in its focus mask. The whole
    operation is a deterministic function of (patch, image, boxes, seeds).
    """
    order = sorted(range(len(detections.boxes)), key=lambda i: detections.boxes[i].score)
    out = CompositeScene(image=image)
    composite = image
    noise_shape = (patch.shape[0], patch.shape[0], 3)
    for i in order:
        box = detections.boxes[i]
        if freeze_transforms or seeds is None:
            t = TransformSample()
        else:
            t = sample_transform(seeds[i], transform_cfg, noise_shape)
        placed = place_patch(
            apply_photometric(patch, t), box, t, image.shape[:2], patch_scale_factor
        )
        if placed is None:
            continue
        canvas, patch_mask = placed
        patch_mask = patch_mask * _box_inside(box, image.shape[:2]).to(patch_mask.dtype)
        if float(patch_mask.sum()) < 4.0:
            logger.warning(
                "skipping detection at (%.1f, %.1f): footprint on the object under 2x2 pixels",
                box.cx, box.cy,
            )
            continue
        composite = compose(composite, canvas, patch_mask)
        focus = torch.from_numpy(build_focus_mask(box, image.shape[:2]))
        out.patch_masks.append(patch_mask)
        out.focus_masks.append(focus)
        out.boxes.append(box)
        out.provenance.append(t)
        out.indices.append(i)
    out.image = composite
    return out
