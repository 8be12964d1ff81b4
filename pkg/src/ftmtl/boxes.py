"""Center-size boxes, IoU, delta encoding and NMS.

Box arrays use the center-size column order ``(w, h, x, y)``; corner arrays
use ``(x1, y1, x2, y2)`` in pixels, origin top-left, y down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoxCS:
    w: float
    h: float
    x: float
    y: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width/height must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoxCS":
        return cls(float(x2 - x1), float(y2 - y1), float(x1 + x2) / 2, float(y1 + y2) / 2)

    @classmethod
    def from_array(cls, a) -> "BoxCS":
        return cls(*(float(v) for v in a))

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.h, self.x, self.y], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


def cs_to_corners(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half_w, half_h = b[:, 0] / 2, b[:, 1] / 2
    return np.stack([b[:, 2] - half_w, b[:, 3] - half_h, b[:, 2] + half_w, b[:, 3] + half_h], axis=1)


def corners_to_cs(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    return np.stack(
        [c[:, 2] - c[:, 0], c[:, 3] - c[:, 1], (c[:, 0] + c[:, 2]) / 2, (c[:, 1] + c[:, 3]) / 2], axis=1
    )


def iou_corners(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner boxes ``a (n,4)`` and ``b (m,4)``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between center-size box arrays."""
    return iou_corners(cs_to_corners(a), cs_to_corners(b))


def iou(a: BoxCS, b: BoxCS) -> float:
    return float(iou_corners(np.array([a.corners()]), np.array([b.corners()]))[0, 0])


def encode(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Deltas ``(log(w/aw), log(h/ah), (x-ax)/aw, (y-ay)/ah)`` row-wise."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if np.any(b[:, :2] <= 0) or np.any(a[:, :2] <= 0):
        raise ValueError("box and anchor widths/heights must be positive")
    return np.stack(
        [np.log(b[:, 0] / a[:, 0]), np.log(b[:, 1] / a[:, 1]), (b[:, 2] - a[:, 2]) / a[:, 0], (b[:, 3] - a[:, 3]) / a[:, 1]],
        axis=1,
    )


def decode(deltas: np.ndarray, anchors: np.ndarray, max_log_scale: float | None = None) -> np.ndarray:
    """Inverse of :func:`encode`; widths stay positive through ``exp``."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    dw, dh = d[:, 0], d[:, 1]
    if max_log_scale is not None:
        dw, dh = np.minimum(dw, max_log_scale), np.minimum(dh, max_log_scale)
    return np.stack([a[:, 0] * np.exp(dw), a[:, 1] * np.exp(dh), a[:, 2] + d[:, 2] * a[:, 0], a[:, 3] + d[:, 3] * a[:, 1]], axis=1)


def clip_corners(corners: np.ndarray, height: int, width: int, min_size: float = 1.0) -> np.ndarray:
    """Clip corner boxes to the image, keeping at least ``min_size`` extent."""
    c = np.asarray(corners, dtype=np.float64).reshape(-1, 4).copy()
    c[:, 0] = np.clip(c[:, 0], 0, width - min_size)
    c[:, 1] = np.clip(c[:, 1], 0, height - min_size)
    c[:, 2] = np.clip(c[:, 2], c[:, 0] + min_size, width)
    c[:, 3] = np.clip(c[:, 3], c[:, 1] + min_size, height)
    return c


def nms(corners: np.ndarray, scores: np.ndarray, threshold: float = 0.5) -> list[int]:
    """Greedy non-maximum suppression; equal scores keep the lower index."""
    corners = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    order = list(np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable"))
    keep: list[int] = []
    while order:
        i = order.pop(0)
        keep.append(int(i))
        if not order:
            break
        ov = iou_corners(corners[[i]], corners[order])[0]
        order = [j for j, o in zip(order, ov) if o <= threshold]
    return keep


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Corner box ``(x1, y1, x2, y2)`` enclosing the nonzero pixels, exclusive ends."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1
