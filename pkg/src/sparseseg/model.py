"""miniUNet: a three-level U-Net written as a pure function of a parameter dict.

Keeping parameters outside any ``nn.Module`` lets the meta-learner build
adapted parameter sets that stay differentiable w.r.t. the originals.

Block recipe::

    encoder i : conv3x3 -> relu -> conv3x3 -> relu -> (skip_i) -> maxpool2
    center    : conv3x3 -> relu -> conv3x3 -> relu
    decoder i : bilinear up x2 -> concat(skip_i) -> conv3x3 -> relu -> conv3x3 -> relu
    head      : conv1x1 -> class scores
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError

ModelParams = dict[str, torch.Tensor]


@dataclass
class ModelConfig:
    encoder_channels: tuple[int, int, int] = (16, 32, 64)
    center_channels: int = 128
    class_count: int = 2
    input_side: int = 128
    in_channels: int = 1
    batch_norm: bool = False

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)

    def validate(self):
        enc = self.encoder_channels
        if len(enc) != 3 or any(c <= 0 for c in enc) or self.center_channels <= 0:
            raise ConfigError("need three positive encoder widths and a positive center width")
        widths = list(enc) + [self.center_channels]
        if any(a >= b for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"channel widths must increase along the encoder, got {widths}")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if self.input_side <= 0 or self.input_side % 8:
            raise ConfigError(f"input_side must be a positive multiple of 8, got {self.input_side}")


def _conv_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """(name, weight shape) for every convolution, in forward order."""
    enc = config.encoder_channels
    shapes = []
    cin = config.in_channels
    for i, c in enumerate(enc):
        shapes += [(f"enc{i}.conv1", (c, cin, 3, 3)), (f"enc{i}.conv2", (c, c, 3, 3))]
        cin = c
    c = config.center_channels
    shapes += [("center.conv1", (c, cin, 3, 3)), ("center.conv2", (c, c, 3, 3))]
    cin = c
    for i in reversed(range(3)):
        c = enc[i]
        shapes += [(f"dec{i}.conv1", (c, cin + c, 3, 3)), (f"dec{i}.conv2", (c, c, 3, 3))]
        cin = c
    shapes.append(("head", (config.class_count, cin, 1, 1)))
    return shapes


def init_params(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ModelParams:
    """He-normal weights (fan-in), zero biases; batch-norm affine set to identity."""
    config.validate()
    gen = torch.Generator().manual_seed(int(seed))
    params = OrderedDict()
    for name, shape in _conv_shapes(config):
        fan_in = shape[1] * shape[2] * shape[3]
        std = math.sqrt(2.0 / fan_in) if name != "head" else math.sqrt(1.0 / fan_in)
        params[f"{name}.weight"] = torch.randn(shape, generator=gen, dtype=dtype) * std
        params[f"{name}.bias"] = torch.zeros(shape[0], dtype=dtype)
        if config.batch_norm and name != "head":
            params[f"{name}.bn_weight"] = torch.ones(shape[0], dtype=dtype)
            params[f"{name}.bn_bias"] = torch.zeros(shape[0], dtype=dtype)
    return params


def param_count(params) -> int:
    return sum(p.numel() for p in params.values())


def flatten(params) -> torch.Tensor:
    return torch.cat([p.reshape(-1) for p in params.values()])


def unflatten(vector: torch.Tensor, like) -> ModelParams:
    out, i = OrderedDict(), 0
    for name, p in like.items():
        out[name] = vector[i:i + p.numel()].view_as(p)
        i += p.numel()
    return out


def _conv_block(x, params, name, batch_norm):
    x = F.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=1)
    if batch_norm:
        # batch statistics only; no running buffers to adapt
        x = F.batch_norm(x, None, None, params[f"{name}.bn_weight"], params[f"{name}.bn_bias"], training=True)
    return F.relu(x)


def as_batch(images) -> torch.Tensor:
    """Stack images into ``N x 1 x H x W`` (accepts arrays, lists or tensors)."""
    if isinstance(images, torch.Tensor):
        x = images
    else:
        x = torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32) for im in images]))
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    return x


def forward(params, images, config: ModelConfig, drop_skips: tuple[int, ...] = ()) -> torch.Tensor:
    """Unnormalized class scores, ``N x class_count x H x W``.

    ``drop_skips`` zeroes the listed skip connections (0 = shallowest) while
    keeping parameter shapes, for ablation.
    """
    x = as_batch(images)
    ref = params["head.weight"]
    x = x.to(ref.dtype)
    side = config.input_side
    if x.dim() != 4 or x.shape[1] != config.in_channels or x.shape[-2:] != (side, side):
        raise DataError(f"expected N x {config.in_channels} x {side} x {side} input, got {tuple(x.shape)}")
    bn = config.batch_norm
    skips = []
    for i in range(3):
        x = _conv_block(x, params, f"enc{i}.conv1", bn)
        x = _conv_block(x, params, f"enc{i}.conv2", bn)
        skips.append(x)
        x = F.max_pool2d(x, 2)
    x = _conv_block(x, params, "center.conv1", bn)
    x = _conv_block(x, params, "center.conv2", bn)
    for i in reversed(range(3)):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        skip = torch.zeros_like(skips[i]) if i in drop_skips else skips[i]
        x = torch.cat([x, skip], dim=1)
        x = _conv_block(x, params, f"dec{i}.conv1", bn)
        x = _conv_block(x, params, f"dec{i}.conv2", bn)
    return F.conv2d(x, params["head.weight"], params["head.bias"])


def scores_to_mask(scores: torch.Tensor) -> np.ndarray:
    """Argmax over classes; ties go to the lowest index (background)."""
    return torch.argmax(scores, dim=1).cpu().numpy().astype(np.uint8)


@torch.no_grad()
def predict(params, images, config: ModelConfig, batch_size: int = 16) -> np.ndarray:
    x = as_batch(images)
    out = [scores_to_mask(forward(params, x[i:i + batch_size], config)) for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def detached(params) -> ModelParams:
    return OrderedDict((k, v.detach().clone()) for k, v in params.items())


def save_checkpoint(path: str | Path, params, config: ModelConfig, **provenance) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"config": asdict(config), "params": detached(params), "provenance": provenance}, path)
    return path


def load_checkpoint(path: str | Path):
    """Returns ``(params, config, provenance)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    config = ModelConfig(**blob["config"])
    return OrderedDict(blob["params"]), config, blob.get("provenance", {})
