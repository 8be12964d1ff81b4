"""Shared residual feature extractor with a total stride of 16."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .nn import conv2d
from .tensor import ShapeError, Tensor, add, relu

DOWNSAMPLE = 16


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: int = 1
    input_channels: int = 1
    block: str = "basic"  # "basic" or "bottleneck"
    bottleneck_ratio: int = 4

    def __post_init__(self):
        if len(self.stage_channels) != 4 or any(c <= 0 for c in self.stage_channels):
            raise ValueError("stage_channels must hold exactly 4 positive ints")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.block not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block type {self.block!r}")

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def stem_channels(self) -> int:
        return self.stage_channels[0] if self.block == "basic" else max(1, self.stage_channels[0] // self.bottleneck_ratio)


DESK = BackboneConfig()
PAPER_SHAPE = BackboneConfig(stage_channels=(64, 256, 512, 1024), block="bottleneck")


@dataclass
class FeatureMap:
    tensor: Tensor
    image_height: int
    image_width: int
    stride: int = field(default=DOWNSAMPLE)


def _block_layout(config: BackboneConfig):
    """Yield ``(prefix, c_in, c_out, stride)`` for every residual block."""
    c_in = config.stem_channels
    for s, c_out in enumerate(config.stage_channels):
        for b in range(config.blocks_per_stage):
            yield f"backbone.s{s}.b{b}", c_in, c_out, 2 if b == 0 else 1
            c_in = c_out


def block_param_shapes(prefix: str, c_in: int, c_out: int, stride: int, config: BackboneConfig) -> dict:
    shapes = {}
    if config.block == "basic":
        shapes[f"{prefix}.conv1.w"] = (c_out, c_in, 3, 3)
        shapes[f"{prefix}.conv1.b"] = (c_out,)
        shapes[f"{prefix}.conv2.w"] = (c_out, c_out, 3, 3)
        shapes[f"{prefix}.conv2.b"] = (c_out,)
    else:
        mid = max(1, c_out // config.bottleneck_ratio)
        shapes[f"{prefix}.conv1.w"] = (mid, c_in, 1, 1)
        shapes[f"{prefix}.conv1.b"] = (mid,)
        shapes[f"{prefix}.conv2.w"] = (mid, mid, 3, 3)
        shapes[f"{prefix}.conv2.b"] = (mid,)
        shapes[f"{prefix}.conv3.w"] = (c_out, mid, 1, 1)
        shapes[f"{prefix}.conv3.b"] = (c_out,)
    if stride != 1 or c_in != c_out:
        shapes[f"{prefix}.proj.w"] = (c_out, c_in, 1, 1)
        shapes[f"{prefix}.proj.b"] = (c_out,)
    return shapes


def param_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "backbone.stem.w": (config.stem_channels, config.input_channels, 3, 3),
        "backbone.stem.b": (config.stem_channels,),
    }
    for prefix, c_in, c_out, stride in _block_layout(config):
        shapes.update(block_param_shapes(prefix, c_in, c_out, stride, config))
    return shapes


def init_params(config: BackboneConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal weights scaled by fan-in, zero biases."""
    out = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            out[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            out[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return out


def residual_block(x: Tensor, p: Mapping[str, Tensor], prefix: str, stride: int = 1, block: str = "basic") -> Tensor:
    """``relu(F(x) + shortcut(x))``; the shortcut projects when shapes change."""
    if block == "basic":
        h = relu(conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], stride=stride, pad=1))
        h = conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], stride=1, pad=1)
    else:
        h = relu(conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"]))
        h = relu(conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], stride=stride, pad=1))
        h = conv2d(h, p[f"{prefix}.conv3.w"], p[f"{prefix}.conv3.b"])
    if f"{prefix}.proj.w" in p:
        shortcut = conv2d(x, p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"], stride=stride)
    else:
        if stride != 1:
            raise ShapeError(f"{prefix}: stride {stride} block needs a projection shortcut")
        shortcut = x
    if shortcut.shape != h.shape:
        raise ShapeError(f"{prefix}: residual shape {h.shape} != shortcut shape {shortcut.shape}")
    return relu(add(h, shortcut))


def backbone_forward(image: Tensor, p: Mapping[str, Tensor], config: BackboneConfig = DESK) -> FeatureMap:
    """Map ``(1, H, W)`` (or ``(N, 1, H, W)``) images to ``(C, H/16, W/16)`` features."""
    h, w = image.shape[-2:]
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ShapeError(f"image size {h}x{w} is not divisible by {DOWNSAMPLE}; pad it first")
    x = relu(conv2d(image, p["backbone.stem.w"], p["backbone.stem.b"], stride=1, pad=1))
    for prefix, _, _, stride in _block_layout(config):
        x = residual_block(x, p, prefix, stride, config.block)
    return FeatureMap(x, h, w)
