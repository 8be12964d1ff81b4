"""Task losses and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import BoxCS, cs_to_corners, encode
from .heads import MASK_SIZE
from .tensor import Tensor, as_tensor, clip, log, mean, tsum

EPS = 1e-7


@dataclass
class LossBreakdown:
    l_cls: float
    l_box: float
    l_mask: float
    l_prop: float = 0.0
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def l_uni(self) -> float:
        a, b, c = self.lambdas
        return a * self.l_cls + b * self.l_box + c * self.l_mask


def smooth_l1(x) -> Tensor:
    """``0.5 x^2`` where ``|x| < 1``, else ``|x| - 0.5``; elementwise."""
    x = as_tensor(x)
    ad = np.abs(x.data)
    quad = ad < 1
    out = np.where(quad, 0.5 * x.data * x.data, ad - 0.5).astype(x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * np.clip(x.data, -1, 1),))


def box_param(box: BoxCS, anchor: BoxCS) -> np.ndarray:
    return encode(box.as_array(), anchor.as_array())[0]


def box_loss(pred_deltas: Tensor, target_deltas) -> Tensor:
    """Per-row sum of smooth-L1 over the four delta components."""
    target = Tensor(np.asarray(target_deltas, dtype=pred_deltas.dtype))
    return tsum(smooth_l1(pred_deltas - target), axis=-1)


def l_box(t: BoxCS, y: BoxCS, anchor: BoxCS) -> float:
    return float(box_loss(Tensor(box_param(t, anchor)), box_param(y, anchor)).data)


def cross_entropy(y_hat, y, eps: float = EPS) -> Tensor:
    """Elementwise binary cross entropy with ``y_hat`` clamped to ``[eps, 1-eps]``."""
    y_hat = as_tensor(y_hat)
    y = np.asarray(y, dtype=y_hat.dtype)
    p = clip(y_hat, eps, 1 - eps)
    return -(log(p) * y + log(1 - p) * (1 - y))


def mask_target(gt_mask: np.ndarray, roi_box, size: int = MASK_SIZE) -> np.ndarray:
    """Crop ``gt_mask`` to the ROI and resample to ``size x size`` (nearest neighbour).

    Bin ``j`` reads the pixel containing the bin centre; outside the image reads 0.
    """
    h, w = gt_mask.shape
    box = roi_box.as_array() if isinstance(roi_box, BoxCS) else np.asarray(roi_box, dtype=np.float64)
    x1, y1, x2, y2 = cs_to_corners(box)[0]
    if x2 <= 0 or y2 <= 0 or x1 >= w or y1 >= h:
        raise ValueError(f"mask_target: ROI {box} does not overlap the {h}x{w} mask")
    centers = (np.arange(size) + 0.5) / size
    xs = np.floor(x1 + centers * (x2 - x1)).astype(int)
    ys = np.floor(y1 + centers * (y2 - y1)).astype(int)
    valid = (ys[:, None] >= 0) & (ys[:, None] < h) & (xs[None, :] >= 0) & (xs[None, :] < w)
    out = gt_mask[np.clip(ys, 0, h - 1)[:, None], np.clip(xs, 0, w - 1)[None, :]]
    return np.where(valid, out, 0).astype(np.float32)


def l_mask(s: Tensor, target) -> Tensor:
    """Mean per-pixel cross entropy over the trailing two axes."""
    return mean(cross_entropy(s, target), axis=(-2, -1))


def l_cls(probs: Tensor, u, eps: float = EPS) -> Tensor:
    """``-log p_u`` per row; ``probs`` is ``(R, 3)`` or a single ``(3,)`` vector."""
    probs = as_tensor(probs)
    if probs.ndim == 1:
        return -log(clip(probs[int(u)], eps, 1.0))
    u = np.asarray(u, dtype=np.int64).reshape(-1)
    return -log(clip(probs[np.arange(len(u)), u], eps, 1.0))


def l_prop(
    scores: Tensor, labels, rng: np.random.Generator | None = None, neg_ratio: float = 3.0
) -> tuple[Tensor, bool]:
    """Mean BCE of objectness over positive and (sub-sampled) negative anchors.

    Returns ``(loss, ok)``; ``ok`` is False when no anchor is usable, in
    which case the loss is 0.
    """
    scores = as_tensor(scores)
    labels = np.asarray(labels).reshape(-1)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    max_neg = int(neg_ratio * max(len(pos), 1))
    if len(neg) > max_neg:
        neg = np.sort((rng or np.random.default_rng(0)).choice(neg, size=max_neg, replace=False))
    idx = np.concatenate([pos, neg])
    if len(idx) == 0:
        return Tensor(np.zeros((), dtype=scores.dtype)), False
    target = (labels[idx] == 1).astype(scores.dtype)
    return mean(cross_entropy(scores[idx], target)), True


def l_uni(l_cls_value, l_box_value, l_mask_value, lambdas=(1.0, 1.0, 1.0)):
    """``lambda1 * L_cls + lambda2 * L_box + lambda3 * L_mask``; works on floats or tensors."""
    if any(l < 0 for l in lambdas):
        raise ValueError(f"loss weights must be non-negative, got {lambdas}")
    a, b, c = lambdas
    return l_cls_value * a + l_box_value * b + l_mask_value * c
