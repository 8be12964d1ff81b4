"""Detection, segmentation and classification heads over ROI features.

The segmentation head's last feature map is re-weighted by the larger of its
two mask probabilities, pooled to a vector, and appended to the pooled ROI
features that feed the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .boxes import BoxCS, decode
from .nn import conv2d, conv_transpose2d, global_mean_pool, linear, max_pool2d
from .tensor import ShapeError, Tensor, concat, elem_max, elem_mul, relu, sigmoid, softmax, stop_gradient

MASK_SIZE = 28
BACKGROUND, BENIGN, MALIGNANT = 0, 1, 2


@dataclass(frozen=True)
class HeadConfig:
    delta: int = 64  # channels of the transferred segmentation features
    seg_hidden: int = 32  # channels after the first deconvolution
    transfer: bool = True
    stop_grad_weight_map: bool = False


@dataclass
class DetectionOutput:
    deltas: Tensor  # (R, 4): dw, dh, dx, dy
    boxes: np.ndarray  # (R, 4) decoded center-size boxes


@dataclass
class SegOutput:
    m_b: Tensor  # (R, 28, 28)
    m_m: Tensor
    theta4: Tensor  # (R, delta, 28, 28)
    probs: Tensor  # (R, 2, 28, 28): benign, malignant


def param_shapes(in_channels: int, cfg: HeadConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "det.w": (4, in_channels),
        "det.b": (4,),
        "seg.deconv1.w": (in_channels, cfg.seg_hidden, 2, 2),
        "seg.deconv1.b": (cfg.seg_hidden,),
        "seg.deconv2.w": (cfg.seg_hidden, cfg.delta, 2, 2),
        "seg.deconv2.b": (cfg.delta,),
        "seg.out.w": (2, cfg.delta, 1, 1),
        "seg.out.b": (2,),
    }
    n_cls_in = in_channels + (cfg.delta if cfg.transfer else 0)
    shapes["cls.w"] = (3, n_cls_in)
    shapes["cls.b"] = (3,)
    return shapes


def _batch(theta1: Tensor) -> tuple[Tensor, bool]:
    if theta1.ndim == 3:
        return theta1.reshape((1,) + theta1.shape), True
    return theta1, False


def detection_head(theta1: Tensor, anchors, p: Mapping[str, Tensor]) -> DetectionOutput:
    """Mean-pool the ROI features, regress deltas, decode against the anchors."""
    theta1, _ = _batch(theta1)
    if theta1.shape[-2:] != (7, 7):
        raise ShapeError(f"detection_head expects 7x7 ROI features, got {theta1.shape[-2:]}")
    deltas = linear(global_mean_pool(theta1), p["det.w"], p["det.b"])
    anchors = anchors.as_array() if isinstance(anchors, BoxCS) else anchors
    return DetectionOutput(deltas, decode(deltas.data, anchors))


def segmentation_head(theta1: Tensor, p: Mapping[str, Tensor]) -> SegOutput:
    """7x7 -> 14x14 -> 28x28 by two deconvolutions, then 1x1 conv to two sigmoid maps."""
    theta1, _ = _batch(theta1)
    if theta1.shape[-2:] != (7, 7):
        raise ShapeError(f"segmentation_head expects 7x7 ROI features, got {theta1.shape[-2:]}")
    theta3 = relu(conv_transpose2d(theta1, p["seg.deconv1.w"], p["seg.deconv1.b"], stride=2))
    theta4 = relu(conv_transpose2d(theta3, p["seg.deconv2.w"], p["seg.deconv2.b"], stride=2))
    probs = sigmoid(conv2d(theta4, p["seg.out.w"], p["seg.out.b"]))
    return SegOutput(probs[:, 0], probs[:, 1], theta4, probs)


def weight_map(m_b: Tensor, m_m: Tensor) -> Tensor:
    """Pixelwise maximum of the benign and malignant probability maps."""
    if m_b.shape != m_m.shape:
        raise ShapeError(f"weight_map: {m_b.shape} vs {m_m.shape}")
    return elem_max(m_b, m_m)


def reweight_features(theta4: Tensor, m_w: Tensor, stop_gradient_weights: bool = False) -> Tensor:
    """Scale every channel of ``theta4`` by the weight map."""
    if theta4.shape[-2:] != m_w.shape[-2:]:
        raise ShapeError(f"reweight_features: map {m_w.shape} does not match features {theta4.shape}")
    if stop_gradient_weights:
        m_w = stop_gradient(m_w)
    return elem_mul(theta4, m_w)


def compress_features(theta4s: Tensor) -> Tensor:
    """2x2 max pool then global mean pool: ``(.., delta, 28, 28) -> (.., delta)``."""
    if theta4s.shape[-2:] != (MASK_SIZE, MASK_SIZE):
        raise ShapeError(f"compress_features expects 28x28 maps, got {theta4s.shape[-2:]}")
    return global_mean_pool(max_pool2d(theta4s, 2, 2))


def transfer_vector(seg: SegOutput, stop_gradient_weights: bool = False) -> Tensor:
    return compress_features(reweight_features(seg.theta4, weight_map(seg.m_b, seg.m_m), stop_gradient_weights))


def classifier_input(theta1: Tensor, transfer: Tensor | None) -> Tensor:
    """Pooled ROI features, followed by the transfer vector when given."""
    theta1, single = _batch(theta1)
    pooled = global_mean_pool(theta1)
    if transfer is None:
        return pooled
    if single and transfer.ndim == 1:
        transfer = transfer.reshape((1, -1))
    return concat(pooled, transfer, axis=1)


def classification_head(theta1: Tensor, transfer: Tensor | None, p: Mapping[str, Tensor]) -> Tensor:
    """Class probabilities ``(R, 3)``: background, benign, malignant."""
    feats = classifier_input(theta1, transfer)
    if feats.shape[-1] != p["cls.w"].shape[1]:
        raise ShapeError(f"classification_head: {feats.shape[-1]} features, weight expects {p['cls.w'].shape[1]}")
    return softmax(linear(feats, p["cls.w"], p["cls.b"]), axis=-1)


def select_final_mask(probs, m_b, m_m):
    """Mask of the predicted class; ``None`` for background. Ties favour malignant."""
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    if probs[BACKGROUND] > max(probs[BENIGN], probs[MALIGNANT]):
        return None
    return m_b if probs[BENIGN] > probs[MALIGNANT] else m_m
