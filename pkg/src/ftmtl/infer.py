"""Sequential inference and the image-level malignant-veto score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import backbone_forward
from .boxes import BoxCS, clip_corners, corners_to_cs, cs_to_corners, nms
from .data.sample import pad_to_multiple, Sample
from .heads import (
    BACKGROUND,
    BENIGN,
    MALIGNANT,
    classification_head,
    detection_head,
    segmentation_head,
    select_final_mask,
    transfer_vector,
)
from .model import FTMTLNet
from .rpn import roi_align, rpn_objectness, select_candidates
from .tensor import Tensor


@dataclass
class Detection:
    box: BoxCS
    objectness: float
    probs: np.ndarray  # (p0, p1, p2)
    mask: np.ndarray | None = None  # 28x28 probabilities of the predicted class

    @property
    def label(self) -> int:
        """Predicted class; benign/malignant ties resolve to malignant."""
        p = self.probs
        if p[BACKGROUND] > max(p[BENIGN], p[MALIGNANT]):
            return BACKGROUND
        return BENIGN if p[BENIGN] > p[MALIGNANT] else MALIGNANT

    @property
    def score(self) -> float:
        """Detection confidence: probability of not being background."""
        return float(1.0 - self.probs[BACKGROUND])


@dataclass
class VetoResult:
    score: float
    no_findings: bool = False


def _as_image(image) -> np.ndarray:
    arr = np.asarray(image.image if isinstance(image, Sample) else image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def infer(image, model: FTMTLNet) -> list[Detection]:
    """Proposals, box refinement, masks plus transferred features, classification.

    Background ROIs are dropped, the rest deduplicated by class-agnostic NMS
    ranked on the larger lesion probability.
    """
    cfg = model.config
    arr = _as_image(image)
    if arr.shape[-2] % 16 or arr.shape[-1] % 16:
        arr = pad_to_multiple(Sample(arr.astype(np.float32), [], "_")).image
    h, w = arr.shape[-2:]
    p = model.frozen_tensors()
    theta0 = backbone_forward(Tensor(arr[None].astype(model.dtype)), p, cfg.backbone).tensor
    anchors = model.anchors(h, w).anchors
    scores = rpn_objectness(theta0, anchors, p).data[0]
    keep = select_candidates(anchors, scores, cfg.rpn_threshold, cfg.top_n_infer)
    if len(keep) == 0:
        return []
    props = anchors[keep]
    theta1 = roi_align(theta0, props, cfg.roi_size, sampling=cfg.roi_sampling)
    refined = detection_head(theta1, props, p).boxes
    refined = corners_to_cs(clip_corners(cs_to_corners(refined), h, w))
    theta1 = roi_align(theta0, refined, cfg.roi_size, sampling=cfg.roi_sampling)
    seg = segmentation_head(theta1, p)
    transfer = transfer_vector(seg) if cfg.heads.transfer else None
    probs = classification_head(theta1, transfer, p).data.astype(np.float64)

    fg = np.flatnonzero(probs.argmax(axis=1) != BACKGROUND)
    if len(fg) == 0:
        return []
    p_max = probs[fg][:, [BENIGN, MALIGNANT]].max(axis=1)
    kept = fg[nms(cs_to_corners(refined[fg]), p_max, cfg.nms_iou)]
    out = []
    for i in kept:
        mask = select_final_mask(probs[i], seg.m_b.data[i], seg.m_m.data[i])
        out.append(
            Detection(BoxCS.from_array(refined[i]), float(scores[keep[i]]), probs[i], None if mask is None else np.array(mask, dtype=np.float64))
        )
    return out


def malignant_veto(detections: list[Detection]) -> VetoResult:
    """Image malignancy: max p2 over malignant boxes, else 1 - max p1 over benign ones."""
    if not detections:
        return VetoResult(0.0, True)
    probs = np.array([d.probs for d in detections], dtype=np.float64)
    malignant = probs[:, MALIGNANT] >= probs[:, BENIGN]
    if malignant.any():
        return VetoResult(float(probs[malignant, MALIGNANT].max()))
    return VetoResult(float(1.0 - probs[:, BENIGN].max()))
