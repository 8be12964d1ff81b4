"""Detection, classification and segmentation metrics.

Detections are given per image as ``(box, score)`` pairs, boxes either
:class:`BoxCS` or center-size arrays; ground truth as a list of boxes per image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import BoxCS, cs_to_corners, iou_matrix

FROC_IOU = 0.2
DETECTED_IOU = 0.4


@dataclass
class CurveTable:
    """A sampled curve with an optional spread column.

    ``stderr`` holds the across-fold spread (sample standard deviation) when
    the curve aggregates several folds, zeros otherwise.
    """

    x: np.ndarray
    y: np.ndarray
    stderr: np.ndarray | None = None
    x_label: str = "x"
    y_label: str = "y"
    folds: int = 1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).ravel()
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        self.stderr = np.zeros_like(self.y) if self.stderr is None else np.asarray(self.stderr, dtype=np.float64).ravel()
        if not (len(self.x) == len(self.y) == len(self.stderr)):
            raise ValueError(f"curve columns differ in length: {len(self.x)}, {len(self.y)}, {len(self.stderr)}")
        if len(self.x) > 1 and np.any(np.diff(self.x) <= 0):
            raise ValueError("curve x values must be strictly increasing")
        if np.any(self.stderr < 0):
            raise ValueError("negative spread in curve")

    def __len__(self) -> int:
        return len(self.x)

    def interp(self, x: float) -> float:
        """Linear interpolation; clamps to the end values outside the range."""
        return float(np.interp(x, self.x, self.y))


def _as_cs(box) -> np.ndarray:
    if isinstance(box, BoxCS):
        return box.as_array()
    return np.asarray(box, dtype=np.float64).reshape(4)


def _box_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.stack([_as_cs(b) for b in boxes])


def iou(a, b) -> float:
    """IoU of two center-size boxes."""
    return float(iou_matrix(_as_cs(a)[None], _as_cs(b)[None])[0, 0])


def _envelope(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One point per distinct x, keeping the highest y seen there."""
    ux = np.unique(x)
    uy = np.array([y[x == v].max() for v in ux])
    return ux, uy


# -- ROC ---------------------------------------------------------------------------------


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) at every distinct score threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{len(scores)} scores vs {len(labels)} labels")
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative examples")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(l)[ends]
    fp = np.cumsum(~l)[ends]
    return np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos]


def roc_auc(scores, labels) -> tuple[float, CurveTable]:
    """Trapezoidal area under the ROC; tied scores form a diagonal segment."""
    fpr, tpr = roc_points(scores, labels)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    x, y = _envelope(fpr, tpr)
    return auc, CurveTable(x, y, x_label="fpr", y_label="tpr", meta={"auc": auc})


# -- matching -----------------------------------------------------------------------------


def greedy_match(det_boxes, det_scores, gt_boxes, iou_min: float, strict: bool = False) -> np.ndarray:
    """Score-ordered one-to-one matching.

    Each detection, highest score first (index order on ties), takes the
    unmatched ground truth it overlaps most, if that overlap passes
    ``iou_min``. Returns the matched gt index per detection, -1 if none.
    """
    d = _box_array(det_boxes)
    g = _box_array(gt_boxes)
    match = np.full(len(d), -1, dtype=np.int64)
    if len(d) == 0 or len(g) == 0:
        return match
    ov = iou_matrix(d, g)
    taken = np.zeros(len(g), dtype=bool)
    for i in np.argsort(-np.asarray(det_scores, dtype=np.float64), kind="stable"):
        cand = np.where(taken, -1.0, ov[i])
        j = int(np.argmax(cand))
        ok = cand[j] > iou_min if strict else cand[j] >= iou_min
        if ok and not taken[j]:
            match[i] = j
            taken[j] = True
    return match


def _split(dets) -> tuple[list, np.ndarray]:
    boxes = [b for b, _ in dets]
    scores = np.array([s for _, s in dets], dtype=np.float64)
    return boxes, scores


# -- FROC --------------------------------------------------------------------------------


def froc(detections: Sequence[Sequence], ground_truth: Sequence[Sequence], iou_min: float = FROC_IOU) -> CurveTable:
    """TPR against false positives per image, sweeping the score threshold.

    A detection is a true positive when greedy matching pairs it with a
    ground-truth box at IoU strictly above ``iou_min``. Since the matching is
    score ordered, one pass over all detections gives the matching for every
    threshold.
    """
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists vs {len(ground_truth)} images")
    n_gt = sum(len(g) for g in ground_truth)
    if n_gt == 0:
        raise ValueError("FROC is undefined without ground-truth masses")
    n_img = len(ground_truth)
    all_scores, all_tp = [], []
    for dets, gts in zip(detections, ground_truth):
        boxes, scores = _split(dets)
        m = greedy_match(boxes, scores, gts, iou_min, strict=True)
        all_scores.append(scores)
        all_tp.append(m >= 0)
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], tp[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1] if len(s) else np.zeros(0, dtype=np.int64)
    tpr = np.r_[0.0, np.cumsum(t)[ends] / n_gt]
    fpi = np.r_[0.0, np.cumsum(~t)[ends] / n_img]
    x, y = _envelope(fpi, tpr)
    return CurveTable(x, y, x_label="fpi", y_label="tpr", meta={"n_gt": n_gt, "n_images": n_img})


def tpr_at_fpi(curve: CurveTable, fpi: float) -> float:
    """TPR at a false-positive rate, linearly interpolated; flat past the last point."""
    return curve.interp(fpi)


def max_tpr_within(curve: CurveTable, fpi: float) -> float:
    """Best TPR reached at no more than ``fpi`` false positives per image."""
    ok = curve.x <= fpi + 1e-12
    return float(curve.y[ok].max()) if ok.any() else 0.0


# -- detection accuracy versus overlap ---------------------------------------------------


def avg_precision_vs_iou(detections, ground_truth, thresholds=None) -> CurveTable:
    """Fraction of ground-truth boxes matched at IoU >= t, rematching greedily for each t."""
    thresholds = np.linspace(0.1, 0.9, 9) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    n_gt = sum(len(g) for g in ground_truth)
    if n_gt == 0:
        raise ValueError("no ground-truth masses")
    y = np.zeros(len(thresholds))
    for dets, gts in zip(detections, ground_truth):
        if len(gts) == 0 or len(dets) == 0:
            continue
        boxes, scores = _split(dets)
        for k, t in enumerate(thresholds):
            y[k] += np.count_nonzero(greedy_match(boxes, scores, gts, t) >= 0)
    return CurveTable(thresholds, y / n_gt, x_label="iou", y_label="detected_fraction")


def filter_detected(detections, ground_truth, iou_min: float = DETECTED_IOU) -> list[list[tuple[int, int, float]]]:
    """Per image, ``(det_index, gt_index, iou)`` for detections whose best IoU >= ``iou_min``."""
    out = []
    for dets, gts in zip(detections, ground_truth):
        g = _box_array(gts)
        d = _box_array([b for b, _ in dets])
        rows = []
        if len(g) and len(d):
            ov = iou_matrix(d, g)
            for i in range(len(d)):
                j = int(np.argmax(ov[i]))
                if ov[i, j] >= iou_min:
                    rows.append((i, j, float(ov[i, j])))
        out.append(rows)
    return out


# -- segmentation ------------------------------------------------------------------------


def dice(pred, gt, printed_form: bool = False) -> float:
    """Dice overlap of two binary masks; two empty masks score 1.

    ``printed_form`` gives ``2|A and B| / |A or B|`` instead of the standard
    ``2|A and B| / (|A| + |B|)``.
    """
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = np.logical_and(a, b).sum()
    denom = np.logical_or(a, b).sum() if printed_form else a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * inter / denom)


def paste_mask(mask, box, shape: tuple[int, int], threshold: float = 0.5) -> np.ndarray:
    """Place a square box-relative mask into a full frame of ``shape``.

    Every image pixel whose centre falls inside the box takes the value of
    the mask cell under that centre.
    """
    m = np.asarray(mask, dtype=np.float64)
    h, w = shape
    x1, y1, x2, y2 = cs_to_corners(_as_cs(box)[None])[0]
    out = np.zeros((h, w), dtype=bool)
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    cin = (cols >= x1) & (cols < x2)
    rin = (rows >= y1) & (rows < y2)
    if not cin.any() or not rin.any():
        return out
    ci = np.clip(((cols[cin] - x1) / (x2 - x1) * m.shape[1]).astype(int), 0, m.shape[1] - 1)
    ri = np.clip(((rows[rin] - y1) / (y2 - y1) * m.shape[0]).astype(int), 0, m.shape[0] - 1)
    out[np.ix_(rin, cin)] = m[np.ix_(ri, ci)] >= threshold
    return out


# -- folds -------------------------------------------------------------------------------


def aggregate_folds(values) -> tuple[float, float]:
    """Mean and sample standard deviation across folds (0 for a single fold)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if len(v) == 0:
        raise ValueError("no fold values")
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def aggregate_curves(curves: Sequence[CurveTable], grid=None) -> CurveTable:
    """Resample fold curves on a common grid; mean and across-fold spread."""
    if not curves:
        raise ValueError("no curves")
    if grid is None:
        grid = np.unique(np.concatenate([c.x for c in curves]))
    grid = np.asarray(grid, dtype=np.float64)
    ys = np.stack([np.interp(grid, c.x, c.y) for c in curves])
    spread = ys.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros(len(grid))
    c0 = curves[0]
    return CurveTable(grid, ys.mean(axis=0), spread, c0.x_label, c0.y_label, folds=len(curves))


# -- whole-run summary -------------------------------------------------------------------


@dataclass
class MassRecord:
    sample_id: str
    mass_index: int
    label: str
    veto: float
    dice: float


@dataclass
class EvalSummary:
    froc: CurveTable
    tpr_at: dict  # fpi -> interpolated TPR
    auc: float | None
    roc: CurveTable | None
    ap_iou: CurveTable
    masses: list  # MassRecord per detected mass
    n_masses: int

    @property
    def dice(self) -> np.ndarray:
        return np.array([m.dice for m in self.masses], dtype=np.float64)

    @property
    def n_detected(self) -> int:
        return len(self.masses)

    @property
    def mean_dice(self) -> float:
        return float(self.dice.mean()) if self.masses else float("nan")


def veto_score(probs) -> float:
    """Max malignant probability over boxes called malignant, else 1 - max benign."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, 3)
    malignant = probs[:, 2] >= probs[:, 1]
    if malignant.any():
        return float(probs[malignant, 2].max())
    return float(1.0 - probs[:, 1].max())


def summarize(
    samples, detections, fpi_points=(2.0, 3.67, 5.0), iou_tp: float = FROC_IOU, iou_detected: float = DETECTED_IOU
) -> EvalSummary:
    """Score per-image detections (objects with box, score, probs, mask) against samples.

    A mass counts as detected when some detection overlaps it at IoU >= ``iou_detected``;
    its malignancy score is the veto over those detections and its Dice comes from
    the highest-scoring one.
    """
    gts = [[m.bbox for m in s.masses] for s in samples]
    pairs = [[(d.box, d.score) for d in dets] for dets in detections]
    curve = froc(pairs, gts, iou_tp)
    tpr = {f: tpr_at_fpi(curve, f) for f in fpi_points}
    records = []
    for s, dets, rows in zip(samples, detections, filter_detected(pairs, gts, iou_detected)):
        by_gt: dict[int, list[int]] = {}
        for i, j, _ in rows:
            by_gt.setdefault(j, []).append(i)
        for j, idx in sorted(by_gt.items()):
            mass = s.masses[j]
            best = max(idx, key=lambda i: (dets[i].score, -i))
            full = np.zeros(mass.mask.shape, dtype=bool)
            if dets[best].mask is not None:
                full = paste_mask(dets[best].mask, dets[best].box, mass.mask.shape)
            veto = veto_score([dets[i].probs for i in idx])
            records.append(MassRecord(s.id, j, mass.label, veto, dice(full, mass.mask)))
    labels = [r.label == "malignant" for r in records]
    auc, roc = (None, None)
    if len(set(labels)) == 2:
        auc, roc = roc_auc([r.veto for r in records], labels)
    return EvalSummary(curve, tpr, auc, roc, avg_precision_vs_iou(pairs, gts), records, sum(len(g) for g in gts))
