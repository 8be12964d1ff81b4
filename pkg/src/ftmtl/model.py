"""The assembled network: backbone, RPN objectness layer and three heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import backbone as bb
from . import heads as hd
from .optim import Parameter
from .rpn import AnchorSet, default_anchor_sizes, generate_anchors
from .tensor import Tensor

INIT_STD = 0.05


@dataclass(frozen=True)
class ModelConfig:
    backbone: bb.BackboneConfig = bb.DESK
    heads: hd.HeadConfig = field(default_factory=hd.HeadConfig)
    image_size: int = 64  # anchor sizes are fractions of this side
    anchor_scales: tuple[float, ...] = (0.25, 0.5, 0.75)
    roi_size: int = 7
    roi_sampling: int = 1
    rpn_threshold: float = 0.5
    top_n_train: int = 32
    top_n_infer: int = 16
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    nms_iou: float = 0.5

    @property
    def anchor_sizes(self) -> tuple[tuple[float, float], ...]:
        return default_anchor_sizes(self.image_size, self.anchor_scales)


PAPER_SHAPE = ModelConfig(
    backbone=bb.PAPER_SHAPE, heads=hd.HeadConfig(delta=256, seg_hidden=256), image_size=512
)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = dict(bb.param_shapes(config.backbone))
    c = config.backbone.out_channels
    shapes["rpn.obj.w"] = (1, c)
    shapes["rpn.obj.b"] = (1,)
    shapes.update(hd.param_shapes(c, config.heads))
    return shapes


@lru_cache(maxsize=32)
def _anchors(h_feat: int, w_feat: int, sizes: tuple) -> AnchorSet:
    return generate_anchors((h_feat, w_feat), bb.DOWNSAMPLE, sizes)


class FTMTLNet:
    """Parameter store plus the shape/grouping bookkeeping around it."""

    def __init__(self, config: ModelConfig | None = None, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {
            name: Parameter(name, Tensor(np.zeros(shape, dtype=self.dtype)))
            for name, shape in param_shapes(self.config).items()
        }

    # parameter groups
    def group(self, which: str) -> list[Parameter]:
        prefixes = {"backbone": ("backbone.",), "rpn": ("rpn.",), "heads": ("det.", "seg.", "cls.")}[which]
        return [p for n, p in self.params.items() if n.startswith(prefixes)]

    def all_params(self) -> list[Parameter]:
        return list(self.params.values())

    def tensors(self) -> dict[str, Tensor]:
        return {n: p.tensor for n, p in self.params.items()}

    def frozen_tensors(self, groups=("backbone", "rpn", "heads")) -> dict[str, Tensor]:
        """Gradient-free views of the named groups, trainable tensors for the rest."""
        out = self.tensors()
        for g in groups:
            for p in self.group(g):
                out[p.name] = Tensor(p.data)
        return out

    def anchors(self, height: int, width: int) -> AnchorSet:
        return _anchors(height // bb.DOWNSAMPLE, width // bb.DOWNSAMPLE, self.config.anchor_sizes)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")
        for n, p in self.params.items():
            arr = np.asarray(state[n])
            if arr.shape != p.data.shape:
                raise ValueError(f"tensor {n}: shape {arr.shape} != expected {p.data.shape}")
            p.tensor.data = arr.astype(self.dtype).copy()
            p.velocity = np.zeros_like(p.tensor.data)


def init_weights(model: FTMTLNet, seed: int = 0) -> FTMTLNet:
    """He-normal backbone, N(0, 0.05) everywhere else, zero biases."""
    rng = np.random.default_rng(seed)
    backbone = bb.init_params(model.config.backbone, rng, model.dtype)
    for name, p in model.params.items():
        if name in backbone:
            p.tensor.data = backbone[name]
        elif name.endswith(".b"):
            p.tensor.data = np.zeros(p.data.shape, dtype=model.dtype)
        else:
            p.tensor.data = (rng.standard_normal(p.data.shape) * INIT_STD).astype(model.dtype)
        p.velocity = np.zeros_like(p.tensor.data)
        p.tensor.grad = None
    return model
