"""Region proposals: anchors, anchor labelling, objectness and ROI-align."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .backbone import DOWNSAMPLE, FeatureMap
from .boxes import BoxCS, clip_corners, corners_to_cs, cs_to_corners, iou_matrix
from .nn import linear
from .tensor import Tensor, matmul, reshape, sigmoid, transpose

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class AnchorSet:
    anchors: np.ndarray  # (n, 4) center-size rows
    stride: int
    sizes: tuple[tuple[float, float], ...]

    def __len__(self) -> int:
        return len(self.anchors)

    def box(self, i: int) -> BoxCS:
        return BoxCS.from_array(self.anchors[i])

    def unique(self) -> np.ndarray:
        corners = np.round(cs_to_corners(self.anchors), 9)
        _, first = np.unique(corners, axis=0, return_index=True)
        return self.anchors[np.sort(first)]


@dataclass
class Candidate:
    box: BoxCS
    objectness: float
    roi_features: Tensor | None = None


def default_anchor_sizes(image_side: float, scales=(0.25, 0.5, 0.75)) -> tuple[tuple[float, float], ...]:
    """Square, 1:2 and 2:1 boxes of equal area at each scale of the image side."""
    r = np.sqrt(2.0)
    sizes = []
    for s in scales:
        side = s * image_side
        sizes += [(side, side), (side / r, side * r), (side * r, side / r)]
    return tuple(sizes)


def generate_anchors(feature_shape, stride: int, sizes: Sequence[tuple[float, float]]) -> AnchorSet:
    """One anchor per (cell, size), centred at ``(j + 0.5) * stride``, clipped to the image."""
    if len(sizes) == 0:
        raise ValueError("generate_anchors: sizes must not be empty")
    hf, wf = feature_shape[-2:]
    ys, xs = np.meshgrid((np.arange(hf) + 0.5) * stride, (np.arange(wf) + 0.5) * stride, indexing="ij")
    centers = np.stack([xs.ravel(), ys.ravel()], axis=1)
    sz = np.asarray(sizes, dtype=np.float64)
    rows = np.empty((len(centers) * len(sz), 4))
    rows[:, 0] = np.tile(sz[:, 0], len(centers))
    rows[:, 1] = np.tile(sz[:, 1], len(centers))
    rows[:, 2] = np.repeat(centers[:, 0], len(sz))
    rows[:, 3] = np.repeat(centers[:, 1], len(sz))
    clipped = clip_corners(cs_to_corners(rows), hf * stride, wf * stride)
    return AnchorSet(corners_to_cs(clipped), stride, tuple(map(tuple, sz)))


def match_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.5, neg_iou: float = 0.3) -> np.ndarray:
    """Label anchors POSITIVE / NEGATIVE / IGNORE against ground-truth boxes.

    Positive when the best IoU reaches ``pos_iou`` or the anchor attains some
    ground truth's maximum IoU; negative below ``neg_iou``.
    """
    anchors = np.asarray(anchors).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes).reshape(-1, 4)
    labels = np.full(len(anchors), IGNORE, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = NEGATIVE
        return labels
    ov = iou_matrix(anchors, gt_boxes)
    best = ov.max(axis=1)
    labels[best < neg_iou] = NEGATIVE
    labels[best >= pos_iou] = POSITIVE
    per_gt = ov.max(axis=0)
    rescue = np.any((ov == per_gt[None, :]) & (per_gt[None, :] > 0), axis=1)
    labels[rescue] = POSITIVE
    return labels


def anchor_pooling_matrix(anchors: np.ndarray, feature_shape, stride: int = DOWNSAMPLE) -> np.ndarray:
    """Row i averages the feature cells covered by anchor i (at least one cell)."""
    hf, wf = feature_shape[-2:]
    c = cs_to_corners(anchors) / stride
    x0 = np.clip(np.floor(c[:, 0]).astype(int), 0, wf - 1)
    y0 = np.clip(np.floor(c[:, 1]).astype(int), 0, hf - 1)
    x1 = np.clip(np.ceil(c[:, 2]).astype(int), 0, wf)
    y1 = np.clip(np.ceil(c[:, 3]).astype(int), 0, hf)
    x1 = np.maximum(x1, x0 + 1)
    y1 = np.maximum(y1, y0 + 1)
    mat = np.zeros((len(anchors), hf, wf))
    for i in range(len(anchors)):
        mat[i, y0[i] : y1[i], x0[i] : x1[i]] = 1.0 / ((y1[i] - y0[i]) * (x1[i] - x0[i]))
    return mat.reshape(len(anchors), hf * wf)


def anchor_features(fm: FeatureMap | Tensor, anchors: np.ndarray, stride: int = DOWNSAMPLE) -> Tensor:
    """Per-channel mean of the feature region under each anchor.

    ``(C, Hf, Wf)`` features give ``(n, C)``; a batch ``(N, C, Hf, Wf)`` gives ``(N, n, C)``.
    """
    theta0 = fm.tensor if isinstance(fm, FeatureMap) else fm
    c, hf, wf = theta0.shape[-3:]
    pool = anchor_pooling_matrix(anchors, (hf, wf), stride).astype(theta0.dtype)
    if theta0.ndim == 3:
        flat = transpose(reshape(theta0, (c, hf * wf)), (1, 0))
        return matmul(Tensor(pool), flat)
    pooled = matmul(reshape(theta0, (theta0.shape[0], c, hf * wf)), Tensor(np.ascontiguousarray(pool.T)))
    return transpose(pooled, (0, 2, 1))


def rpn_objectness(fm: FeatureMap | Tensor, anchors: np.ndarray, p: Mapping[str, Tensor], stride: int = DOWNSAMPLE) -> Tensor:
    """Objectness probability for every anchor: ``(n,)``, or ``(N, n)`` for a batch."""
    feats = anchor_features(fm, np.asarray(anchors).reshape(-1, 4), stride)
    logits = linear(feats, p["rpn.obj.w"], p["rpn.obj.b"])
    return reshape(sigmoid(logits), logits.shape[:-1])


def select_candidates(
    anchors: np.ndarray,
    scores: np.ndarray,
    threshold: float = 0.5,
    top_n: int = 16,
    gt_boxes: np.ndarray | None = None,
    min_positives: int = 4,
    pos_iou: float = 0.5,
) -> np.ndarray:
    """Indices of anchors scoring above ``threshold``, best first, at most ``top_n``.

    Passing ``gt_boxes`` enables training mode: when fewer than
    ``min_positives`` selected anchors reach ``pos_iou`` with a ground truth,
    the highest-IoU anchors of each ground truth are appended.
    """
    anchors = np.asarray(anchors).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = [int(i) for i in order if scores[i] > threshold][:top_n]
    if gt_boxes is None or len(gt_boxes) == 0:
        return np.asarray(keep, dtype=np.int64)
    ov = iou_matrix(anchors, np.asarray(gt_boxes).reshape(-1, 4))
    n_pos = int(np.sum(ov[keep].max(axis=1) >= pos_iou)) if keep else 0
    if n_pos < min_positives:
        chosen = set(keep)
        for g in range(ov.shape[1]):
            ranked = np.argsort(-ov[:, g], kind="stable")
            added = 0
            for i in ranked:
                if added >= min_positives - n_pos or ov[i, g] <= 0:
                    break
                if int(i) not in chosen:
                    keep.append(int(i))
                    chosen.add(int(i))
                added += 1
    return np.asarray(keep, dtype=np.int64)


def roi_align_matrix(
    boxes: np.ndarray,
    feature_shape,
    out_size: int = 7,
    stride: int = DOWNSAMPLE,
    sampling: int = 1,
    batch_index: np.ndarray | None = None,
    n_images: int = 1,
) -> np.ndarray:
    """Bilinear sampling weights mapping flattened features to ROI bins.

    Returns a ``(R * out * out, n_images * Hf * Wf)`` matrix. Sample points sit
    at the centres of ``sampling x sampling`` sub-bins, in feature coordinates
    where cell ``k`` is centred at ``k``; samples beyond the border clamp to
    the edge cells.
    """
    hf, wf = feature_shape[-2:]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    r = len(boxes)
    if batch_index is None:
        batch_index = np.zeros(r, dtype=np.int64)
    corners = cs_to_corners(boxes)
    img_h, img_w = hf * stride, wf * stride
    outside = (corners[:, 2] <= 0) | (corners[:, 3] <= 0) | (corners[:, 0] >= img_w) | (corners[:, 1] >= img_h)
    if np.any(outside):
        raise ValueError(f"roi_align: box {boxes[np.argmax(outside)]} lies entirely outside the image")
    c = corners / stride
    frac = (np.arange(out_size)[:, None] + (np.arange(sampling)[None, :] + 0.5) / sampling).reshape(-1)
    xs = c[:, 0:1] + frac[None, :] * (c[:, 2:3] - c[:, 0:1]) / out_size - 0.5  # (r, out*s)
    ys = c[:, 1:2] + frac[None, :] * (c[:, 3:4] - c[:, 1:2]) / out_size - 0.5
    xs = np.clip(xs, 0, wf - 1)
    ys = np.clip(ys, 0, hf - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, wf - 1)
    y1 = np.minimum(y0 + 1, hf - 1)
    lx, ly = xs - x0, ys - y0

    n_s = out_size * sampling
    # rows indexed (roi, bin_y, bin_x); each bin averages sampling**2 points
    roi = np.repeat(np.arange(r), n_s * n_s)
    sy = np.tile(np.repeat(np.arange(n_s), n_s), r)
    sx = np.tile(np.tile(np.arange(n_s), n_s), r)
    row = (roi * out_size + sy // sampling) * out_size + sx // sampling
    base = batch_index[roi] * hf * wf
    w = 1.0 / (sampling * sampling)
    mat = np.zeros((r * out_size * out_size, n_images * hf * wf))
    for yy, wy in ((y0, 1 - ly), (y1, ly)):
        for xx, wx in ((x0, 1 - lx), (x1, lx)):
            col = base + yy[roi, sy] * wf + xx[roi, sx]
            np.add.at(mat, (row, col), w * wy[roi, sy] * wx[roi, sx])
    return mat


def roi_align(
    fm: FeatureMap | Tensor,
    boxes,
    out_size: int = 7,
    stride: int = DOWNSAMPLE,
    sampling: int = 1,
    batch_index: np.ndarray | None = None,
) -> Tensor:
    """Resample box regions of ``theta0`` to ``(R, C, out, out)``.

    ``fm`` may be a single ``(C, Hf, Wf)`` map or a batch ``(N, C, Hf, Wf)``
    with ``batch_index`` naming the image of each box. A single
    :class:`BoxCS` yields ``(C, out, out)``.
    """
    theta0 = fm.tensor if isinstance(fm, FeatureMap) else fm
    single = isinstance(boxes, BoxCS)
    box_arr = boxes.as_array()[None] if single else np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if theta0.ndim == 3:
        n, (c, hf, wf) = 1, theta0.shape
        flat = transpose(reshape(theta0, (c, hf * wf)), (1, 0))
    else:
        n, c, hf, wf = theta0.shape
        flat = reshape(transpose(theta0, (0, 2, 3, 1)), (n * hf * wf, c))
    mat = roi_align_matrix(box_arr, (hf, wf), out_size, stride, sampling, batch_index, n).astype(theta0.dtype)
    out = matmul(Tensor(mat), flat)  # (R*out*out, C)
    out = transpose(reshape(out, (len(box_arr), out_size, out_size, c)), (0, 3, 1, 2))
    return reshape(out, (c, out_size, out_size)) if single else out
