"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment. Every key has a default;
unknown keys are rejected. The resolved configuration is written next to
every output so a run can be repeated from its own directory.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .backbone import BackboneConfig
from .heads import HeadConfig
from .model import PAPER_SHAPE, ModelConfig
from .train import TrainConfig

SEED_ENV = "FTMTL_SEED"
CONFIG_NAME = "config.txt"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # backbone
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: int = 1
    block: str = "basic"
    input_channels: int = 1
    # heads
    delta: int = 64
    seg_hidden: int = 32
    transfer: bool = True
    stop_grad_weight_map: bool = False
    # proposals and ROIs
    image_size: int = 64
    anchor_scales: tuple[float, ...] = (0.25, 0.5, 0.75)
    roi_size: int = 7
    roi_sampling: int = 1
    rpn_threshold: float = 0.5
    top_n_train: int = 32
    top_n_infer: int = 16
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    nms_iou: float = 0.5
    # training
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 4
    epochs_rpn: int = 10
    epochs_heads: int = 10
    epochs_joint: int = 10
    lambda_cls: float = 1.0
    lambda_box: float = 1.0
    lambda_mask: float = 1.0
    seed: int = 0
    rois_per_image: int = 16
    max_pos_fraction: float = 0.5
    prop_neg_ratio: float = 3.0
    prop_in_joint: bool = True
    gt_rois: bool = True
    jitter_rois: int = 4
    jitter: float = 0.15
    cosine_lr: bool = False
    min_forced_positives: int = 4
    # data handling for training runs
    folds: int = 5
    benign_reps: int = 0
    malignant_reps: int = 0
    crop_breast: bool = False
    # evaluation
    iou_tp: float = 0.2
    iou_detected: float = 0.4
    fpi_points: tuple[float, ...] = (3.67, 5.0)

    def __post_init__(self):
        if self.block not in ("basic", "bottleneck"):
            raise ConfigError(f"block must be 'basic' or 'bottleneck', got {self.block!r}")
        if len(self.stage_channels) != 4:
            raise ConfigError("stage_channels needs exactly 4 values")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")

    # -- conversions -----------------------------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=BackboneConfig(
                stage_channels=tuple(self.stage_channels),
                blocks_per_stage=self.blocks_per_stage,
                input_channels=self.input_channels,
                block=self.block,
            ),
            heads=HeadConfig(self.delta, self.seg_hidden, self.transfer, self.stop_grad_weight_map),
            image_size=self.image_size,
            anchor_scales=tuple(self.anchor_scales),
            roi_size=self.roi_size,
            roi_sampling=self.roi_sampling,
            rpn_threshold=self.rpn_threshold,
            top_n_train=self.top_n_train,
            top_n_infer=self.top_n_infer,
            pos_iou=self.pos_iou,
            neg_iou=self.neg_iou,
            nms_iou=self.nms_iou,
        )

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                lr=self.lr,
                momentum=self.momentum,
                batch_size=self.batch_size,
                epochs_rpn=self.epochs_rpn,
                epochs_heads=self.epochs_heads,
                epochs_joint=self.epochs_joint,
                lambdas=(self.lambda_cls, self.lambda_box, self.lambda_mask),
                seed=self.seed,
                rois_per_image=self.rois_per_image,
                max_pos_fraction=self.max_pos_fraction,
                prop_neg_ratio=self.prop_neg_ratio,
                prop_in_joint=self.prop_in_joint,
                gt_rois=self.gt_rois,
                min_forced_positives=self.min_forced_positives,
                jitter_rois=self.jitter_rois,
                jitter=self.jitter,
                cosine_lr=self.cosine_lr,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_model_config(cls, mc: ModelConfig, **overrides) -> "RunConfig":
        bb, hd = mc.backbone, mc.heads
        return cls(
            stage_channels=tuple(bb.stage_channels),
            blocks_per_stage=bb.blocks_per_stage,
            block=bb.block,
            input_channels=bb.input_channels,
            delta=hd.delta,
            seg_hidden=hd.seg_hidden,
            transfer=hd.transfer,
            stop_grad_weight_map=hd.stop_grad_weight_map,
            image_size=mc.image_size,
            anchor_scales=tuple(mc.anchor_scales),
            roi_size=mc.roi_size,
            roi_sampling=mc.roi_sampling,
            rpn_threshold=mc.rpn_threshold,
            top_n_train=mc.top_n_train,
            top_n_infer=mc.top_n_infer,
            pos_iou=mc.pos_iou,
            neg_iou=mc.neg_iou,
            nms_iou=mc.nms_iou,
            **overrides,
        )

    def replace(self, **changes) -> "RunConfig":
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    # -- text form -------------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return (base or cls()).replace(**parse_pairs(text))

    def save(self, directory) -> Path:
        path = Path(directory) / CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        return path


PRESETS = {
    "desk": RunConfig(),
    "paper-shape": RunConfig.from_model_config(PAPER_SHAPE),
}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return str(v)


def _convert(name: str, raw: str):
    field_types = {f.name: f for f in fields(RunConfig)}
    default = field_types[name].default
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(x.strip()) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_pairs(text: str) -> dict:
    """Parse ``key = value`` lines into typed values; rejects unknown keys."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _convert(key, raw)
    return out


def load_config(path=None, preset: str = "desk", overrides: dict | None = None, environ=None) -> RunConfig:
    """Preset, then file, then overrides. ``FTMTL_SEED`` fills the seed when nothing else sets it."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    environ = os.environ if environ is None else environ
    cfg = PRESETS[preset]
    pairs = {}
    if path is not None:
        pairs.update(parse_pairs(Path(path).read_text(encoding="utf-8")))
    if overrides:
        pairs.update(overrides)
    if "seed" not in pairs and environ.get(SEED_ENV):
        try:
            pairs["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return cfg.replace(**pairs)
