"""Training objective: two-term depth loss, smoothness loss, weighted total.

The depth loss splits into the contribution of pixels covered by the patch
and the contribution of the remaining object pixels; squaring the covered
term slows its convergence so optimization pressure shifts to the rest of
the object. All terms are differentiable w.r.t. the patch and are computed
in whatever dtype the inputs carry (tests run them in float64 against
scalar-loop oracles).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from scipy import ndimage

from .core import check_mask
from .errors import ConfigError, DataError

TargetMode = Literal["constant_far", "border_fill"]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # weight on the depth term
    gamma: float = 2.0  # weight on the smoothness term
    use_d1: bool = True
    use_d2: bool = True
    square_d1: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ConfigError(f"loss weights must be >= 0, got alpha={self.alpha} gamma={self.gamma}")
        if not (self.use_d1 or self.use_d2):
            raise ConfigError("at least one of use_d1/use_d2 must be enabled")


@dataclass(frozen=True)
class LossReport:
    l_d1: float
    l_d2: float
    l_depth: float
    l_tv: float
    l_total: float

    def as_dict(self) -> dict[str, float]:
        return {
            "l_d1": self.l_d1,
            "l_d2": self.l_d2,
            "l_depth": self.l_depth,
            "l_tv": self.l_tv,
            "l_total": self.l_total,
        }

    def log_row(self, epoch: int, step: int) -> dict:
        return {"ts": time.time(), "epoch": epoch, "step": step, **self.as_dict()}


def _check_shapes(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) > 1:
        raise DataError(f"shape mismatch between loss inputs: {sorted(shapes)}")


def _check_subset(m_f: torch.Tensor, m_p: torch.Tensor) -> None:
    if bool(((m_p > 0) & (m_f <= 0)).any()):
        raise DataError("patch mask is not contained in focus mask")


def depth_loss_d1(d_t: torch.Tensor, d_adv: torch.Tensor, m_p: torch.Tensor) -> torch.Tensor:
    """Absolute target error on patch-covered pixels, averaged over the full grid."""
    _check_shapes(d_t, d_adv, m_p)
    return (torch.abs(d_t - d_adv) * m_p).sum() / d_t.numel()


def depth_loss_d2(
    d_t: torch.Tensor, d_adv: torch.Tensor, m_f: torch.Tensor, m_p: torch.Tensor
) -> torch.Tensor:
    """Absolute target error on object pixels outside the patch footprint."""
    _check_shapes(d_t, d_adv, m_f, m_p)
    _check_subset(m_f, m_p)
    return (torch.abs(d_t - d_adv) * (m_f - m_p)).sum() / d_t.numel()


def depth_loss(
    d_t: torch.Tensor,
    d_adv: torch.Tensor,
    m_f: torch.Tensor,
    m_p: torch.Tensor,
    weights: LossWeights,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Combined depth term under the ablation flags.

    Returns (combined, d1, d2); the combined term is d1**2 + d2 with the
    default flags, and drops/unsquares terms per the flags for ablations.
    """
    d1 = depth_loss_d1(d_t, d_adv, m_p)
    d2 = depth_loss_d2(d_t, d_adv, m_f, m_p)
    combined = torch.zeros_like(d1)
    if weights.use_d1:
        combined = combined + (d1 * d1 if weights.square_d1 else d1)
    if weights.use_d2:
        combined = combined + d2
    return combined, d1, d2


def tv_loss(patch: torch.Tensor) -> torch.Tensor:
    """Total variation of the patch over interior neighbor pairs.

    Accepts (S, S) or (S, S, C); channels are summed. Zero only for a
    per-channel constant patch. The sqrt subgradient at zero is taken as
    zero so saturated flat regions do not poison the gradient.
    """
    if patch.shape[0] < 2 or patch.shape[1] < 2:
        raise DataError(f"total variation needs a patch of side >= 2, got {tuple(patch.shape)}")
    down = patch[1:, :-1, ...] - patch[:-1, :-1, ...]
    right = patch[:-1, 1:, ...] - patch[:-1, :-1, ...]
    sq = down * down + right * right
    flat = sq == 0
    safe = torch.where(flat, torch.ones_like(sq), sq)
    return torch.where(flat, torch.zeros_like(sq), torch.sqrt(safe)).sum()


def total_loss(
    l_depth: torch.Tensor | float,
    l_tv: torch.Tensor | float,
    weights: LossWeights,
    l_d1: torch.Tensor | float = 0.0,
    l_d2: torch.Tensor | float = 0.0,
) -> tuple[torch.Tensor | float, LossReport]:
    """Weighted total objective plus the per-term report used for logging."""
    total = weights.alpha * l_depth + weights.gamma * l_tv
    report = LossReport(
        l_d1=float(l_d1),
        l_d2=float(l_d2),
        l_depth=float(l_depth),
        l_tv=float(l_tv),
        l_total=float(total),
    )
    return total, report


def make_target_disparity(
    d_clean: np.ndarray, m_f: np.ndarray, mode: TargetMode = "constant_far"
) -> np.ndarray:
    """Target map the attack pushes the prediction toward inside the object.

    constant_far zeroes the object region (reads as maximally distant);
    border_fill continues the surrounding background into it by copying
    each inside pixel from its nearest outside neighbor.
    """
    m = check_mask(m_f).astype(bool)
    d_clean = np.asarray(d_clean)
    if d_clean.shape != m.shape:
        raise DataError(f"shape mismatch: disparity {d_clean.shape} vs mask {m.shape}")
    if mode == "constant_far":
        out = d_clean.copy()
        out[m] = 0.0
        return out
    if mode == "border_fill":
        if m.all():
            raise DataError("border_fill needs at least one pixel outside the focus mask")
        indices = ndimage.distance_transform_edt(m, return_distances=False, return_indices=True)
        return d_clean[indices[0], indices[1]]
    raise ConfigError(f"unknown target mode {mode!r}")
