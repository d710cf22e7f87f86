"""Victim-model abstraction and the built-in toy depth network.

The attack only needs a differentiable image -> disparity map. The bundled
toy model is a small 4-level encoder-decoder with skip connections (a
miniature of the U-Net style the real victims use) trained on synthetic
scenes; external pretrained networks plug in through the adapter registry.
Victim parameters are frozen during attacks and guarded by a checksum.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import check_image
from .errors import ConfigError, DataError, TrainingError

logger = logging.getLogger(__name__)

DEFAULT_INPUT_SHAPE = (48, 96)
DEFAULT_WIDTHS = (8, 16, 32, 64)
DEFAULT_NORMALIZATION = ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25))


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.act = nn.ELU()

    def forward(self, x):
        return self.act(self.conv(x))


class ToyDepthNet(nn.Module):
    """4-level encoder-decoder with skips; sigmoid head keeps output in [0, 1].

    A pooled scene embedding is mixed back into the bottleneck so the
    decoder sees global context as well as local texture, the way real
    depth networks do. ELU activations and bilinear resampling keep the map
    smooth enough for finite-difference gradient checks.
    """

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS,
                 normalization=DEFAULT_NORMALIZATION,
                 skips: tuple[bool, bool, bool] = (True, True, True),
                 context_max_pool: bool = False):
        super().__init__()
        if len(widths) != 4:
            raise ConfigError(f"toy net expects 4 encoder widths, got {widths}")
        w = tuple(widths)
        mean, std = normalization
        self.register_buffer("input_mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(std).view(1, 3, 1, 1))
        self.enc0 = _ConvBlock(3, w[0])
        # Strided convs downsample, as in the ResNet-style encoders the real
        # victims use.
        self.enc1 = _ConvBlock(w[0], w[1], stride=2)
        self.enc2 = _ConvBlock(w[1], w[2], stride=2)
        self.enc3 = _ConvBlock(w[2], w[3], stride=2)
        self.context_score = nn.Conv2d(w[3], 1, 1)
        self.context = nn.Sequential(
            nn.Linear(w[3], w[3]), nn.ELU(), nn.Linear(w[3], w[3])
        )
        # Scene embedding feeds every decoder level, not just the bottleneck.
        self.context_proj2 = nn.Linear(w[3], w[2])
        self.context_proj1 = nn.Linear(w[3], w[1])
        self.context_proj0 = nn.Linear(w[3], w[0])
        # skips = (s2, s1, s0): which encoder levels the decoder reuses
        self.skips = tuple(skips)
        self.context_max_pool = context_max_pool
        self.dec2 = _ConvBlock(w[3] + (w[2] if self.skips[0] else 0), w[2])
        self.dec1 = _ConvBlock(w[2] + (w[1] if self.skips[1] else 0), w[1])
        self.dec0 = _ConvBlock(w[1] + (w[0] if self.skips[2] else 0), w[0])
        self.head = nn.Conv2d(w[0], 1, 3, padding=1)
        self.widths = w

    @staticmethod
    def _up(x):
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - self.input_mean.to(x.dtype)) / self.input_std.to(x.dtype)
        s0 = self.enc0(x)
        s1 = self.enc1(s0)
        s2 = self.enc2(s1)
        bottleneck = self.enc3(s2)
        # Scene embedding pooled over bottleneck cells with learned attention
        # weights, so salient regions dominate global context.
        batch, channels, bh, bw = bottleneck.shape
        scores = self.context_score(bottleneck).reshape(batch, bh * bw)
        attention = torch.softmax(scores, dim=1)
        pooled = (bottleneck.reshape(batch, channels, bh * bw) * attention[:, None, :]).sum(-1)
        if self.context_max_pool:
            pooled = pooled + bottleneck.amax(dim=(2, 3))
        scene = self.context(pooled)
        bottleneck = bottleneck + scene[:, :, None, None]
        y = self.dec2(self._cat(self._up(bottleneck), s2, self.skips[0]))
        y = y + self.context_proj2(scene)[:, :, None, None]
        y = self.dec1(self._cat(self._up(y), s1, self.skips[1]))
        y = y + self.context_proj1(scene)[:, :, None, None]
        y = self.dec0(self._cat(self._up(y), s0, self.skips[2]))
        y = y + self.context_proj0(scene)[:, :, None, None]
        return torch.sigmoid(self.head(y)).squeeze(1)

    @staticmethod
    def _cat(up: torch.Tensor, skip: torch.Tensor, use_skip: bool) -> torch.Tensor:
        return torch.cat([up, skip], dim=1) if use_skip else up


@dataclass
class DepthModelHandle:
    """A victim model plus the metadata the pipeline needs to drive it."""

    name: str
    input_shape: tuple[int, int]
    normalization: tuple[tuple[float, float, float], tuple[float, float, float]]
    frozen: bool
    net: nn.Module
    # "none" means the net already emits [0, 1] disparity; adapters for
    # networks with unbounded raw disparity declare "per_image_minmax".
    output_normalization: str = "none"

    def checksum(self) -> str:
        return parameter_checksum(self.net)


def parameter_checksum(net: nn.Module) -> str:
    """Stable digest of all weights and biases (order-independent by name)."""
    digest = hashlib.sha256()
    for name, param in sorted(net.named_parameters()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().numpy().astype(np.float32).tobytes())
    return digest.hexdigest()


def freeze_model(handle: DepthModelHandle) -> DepthModelHandle:
    handle.net.eval()
    for param in handle.net.parameters():
        param.requires_grad_(False)
    handle.frozen = True
    return handle


def clone_as_double(handle: DepthModelHandle) -> DepthModelHandle:
    """Float64 copy of the model for finite-difference gradient checks."""
    net = copy.deepcopy(handle.net).double()
    return freeze_model(replace(handle, net=net))


def new_toy_model(
    input_shape: tuple[int, int] = DEFAULT_INPUT_SHAPE,
    widths: Sequence[int] = DEFAULT_WIDTHS,
    seed: int = 0,
    skips: tuple[bool, bool, bool] = (True, True, True),
    context_max_pool: bool = False,
) -> DepthModelHandle:
    """Randomly initialized (untrained) toy model, frozen."""
    height, width = input_shape
    if height % 8 or width % 8:
        raise ConfigError(f"toy model input sides must be divisible by 8, got {input_shape}")
    torch.manual_seed(seed)
    net = ToyDepthNet(widths, skips=skips, context_max_pool=context_max_pool)
    return freeze_model(
        DepthModelHandle(
            name="toy",
            input_shape=(height, width),
            normalization=DEFAULT_NORMALIZATION,
            frozen=True,
            net=net,
        )
    )


def forward_batch(handle: DepthModelHandle, images: torch.Tensor) -> torch.Tensor:
    """Differentiable forward pass on a (B, H, W, 3) batch -> (B, H, W)."""
    if images.ndim != 4 or images.shape[3] != 3:
        raise DataError(f"expected (B, H, W, 3) batch, got {tuple(images.shape)}")
    out = handle.net(images.permute(0, 3, 1, 2))
    if handle.output_normalization == "per_image_minmax":
        lo = out.amin(dim=(1, 2), keepdim=True)
        hi = out.amax(dim=(1, 2), keepdim=True)
        out = (out - lo) / torch.clamp(hi - lo, min=1e-12)
    return out


def forward_with_range(
    handle: DepthModelHandle, image: np.ndarray, allow_resize: bool = False
) -> tuple[np.ndarray, tuple[float, float]]:
    """Predict one image's disparity plus the raw output range.

    The range is what a persisted map's sidecar records; for models that
    already emit [0, 1] it is the identity range of the raw output.
    """
    image = check_image(image)
    if image.shape[:2] != handle.input_shape:
        if not allow_resize:
            raise DataError(
                f"image shape {image.shape[:2]} does not match model input "
                f"{handle.input_shape} and resizing is disabled"
            )
        tensor = torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0)
        tensor = F.interpolate(tensor, size=handle.input_shape, mode="bilinear", align_corners=False)
        image = tensor.squeeze(0).permute(1, 2, 0).numpy()
    with torch.no_grad():
        raw = handle.net(torch.from_numpy(image).permute(2, 0, 1).unsqueeze(0))
        raw_min = float(raw.min())
        raw_max = float(raw.max())
        batch = raw
        if handle.output_normalization == "per_image_minmax":
            batch = (raw - raw_min) / max(raw_max - raw_min, 1e-12)
    return batch.squeeze(0).numpy().astype(np.float32), (raw_min, raw_max)


def forward(handle: DepthModelHandle, image: np.ndarray, allow_resize: bool = False) -> np.ndarray:
    """Predict a [0, 1] disparity map for one (H, W, 3) image."""
    disp, _ = forward_with_range(handle, image, allow_resize)
    return disp


def train_toy_model(
    scenes,
    epochs: int = 40,
    lr: float = 2e-3,
    seed: int = 0,
    batch_size: int = 16,
    widths: Sequence[int] = DEFAULT_WIDTHS,
) -> tuple[DepthModelHandle, list[float]]:
    """Fit the toy net to (image, true disparity) pairs by pixelwise L1.

    Returns the frozen handle and the per-epoch training-loss curve.
    epochs=0 returns the randomly initialized frozen model.
    """
    if not scenes:
        raise DataError("cannot train on an empty corpus")
    height, width = scenes[0].image.shape[:2]
    handle = new_toy_model((height, width), widths=widths, seed=seed)
    images = torch.from_numpy(np.stack([s.image for s in scenes]))
    targets = torch.from_numpy(np.stack([s.true_disparity for s in scenes]))
    net = handle.net
    net.train()
    for param in net.parameters():
        param.requires_grad_(True)
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    history: list[float] = []
    n = len(scenes)
    for epoch in range(epochs):
        order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(epoch,))).permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            pred = forward_batch(handle, images[idx])
            loss = torch.abs(pred - targets[idx]).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss))
        mean_loss = float(np.mean(epoch_losses))
        if not math.isfinite(mean_loss):
            raise TrainingError(
                f"toy model training diverged (loss={mean_loss}) at epoch {epoch}; "
                f"seed={seed} lr={lr} batch_size={batch_size}"
            )
        history.append(mean_loss)
        if epoch % 10 == 0 or epoch == epochs - 1:
            logger.info("toy model epoch %d/%d: train L1 %.4f", epoch + 1, epochs, mean_loss)
    return freeze_model(handle), history


def evaluate_model(handle: DepthModelHandle, scenes) -> float:
    """Mean absolute disparity error over a held-out scene list."""
    if not scenes:
        raise DataError("cannot evaluate on an empty corpus")
    images = torch.from_numpy(np.stack([s.image for s in scenes]))
    targets = torch.from_numpy(np.stack([s.true_disparity for s in scenes]))
    with torch.no_grad():
        pred = forward_batch(handle, images)
        return float(torch.abs(pred - targets).mean())


def save_model(handle: DepthModelHandle, out_dir: str | Path) -> Path:
    """Persist weights plus a manifest carrying the parameter checksum."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(handle.net.state_dict(), out_dir / "weights.pt")
    manifest = {
        "name": handle.name,
        "input_shape": list(handle.input_shape),
        "normalization": [list(handle.normalization[0]), list(handle.normalization[1])],
        "output_normalization": handle.output_normalization,
        "checksum": handle.checksum(),
        "widths": list(getattr(handle.net, "widths", DEFAULT_WIDTHS)),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out_dir


def load_model(model_dir: str | Path) -> DepthModelHandle:
    model_dir = Path(model_dir)
    manifest_path = model_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no model manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest["name"] != "toy":
        raise ConfigError(
            f"checkpoint names architecture {manifest['name']!r}; only 'toy' is bundled. "
            "External models must be registered as adapters."
        )
    net = ToyDepthNet(
        widths=manifest.get("widths", DEFAULT_WIDTHS),
        normalization=(
            tuple(manifest["normalization"][0]),
            tuple(manifest["normalization"][1]),
        ),
    )
    net.load_state_dict(torch.load(model_dir / "weights.pt", weights_only=True))
    handle = DepthModelHandle(
        name=manifest["name"],
        input_shape=tuple(manifest["input_shape"]),
        normalization=(
            tuple(manifest["normalization"][0]),
            tuple(manifest["normalization"][1]),
        ),
        frozen=True,
        net=net,
        output_normalization=manifest.get("output_normalization", "none"),
    )
    if handle.checksum() != manifest["checksum"]:
        raise DataError(f"model weights at {model_dir} do not match manifest checksum")
    return freeze_model(handle)


# Adapter contract: a factory returning a frozen DepthModelHandle whose net
# accepts [0, 1] RGB as (B, 3, H, W), returns raw disparity as (B, H, W)
# with gradients available w.r.t. the input, and declares
# output_normalization="per_image_minmax" when the raw range is unbounded.
_MODEL_REGISTRY: dict[str, Callable[..., DepthModelHandle]] = {}


def register_model(name: str, factory: Callable[..., DepthModelHandle]) -> None:
    _MODEL_REGISTRY[name] = factory


register_model("toy", new_toy_model)


def resolve_model(spec: str) -> DepthModelHandle:
    """Turn a --model value into a handle: checkpoint directory or registry name."""
    path = Path(spec)
    if path.is_dir():
        return load_model(path)
    if spec in _MODEL_REGISTRY:
        return _MODEL_REGISTRY[spec]()
    raise ConfigError(
        f"--model {spec!r} is neither a checkpoint directory nor a registered adapter; "
        f"known adapters: {sorted(_MODEL_REGISTRY)}"
    )
