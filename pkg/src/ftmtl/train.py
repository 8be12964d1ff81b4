"""Staged training: initialise, fit the proposal stage, fit the heads, fine-tune jointly.

Phase A initialises all weights. Phase B trains backbone and RPN on the
proposal loss. Phase C freezes backbone and RPN and trains the heads on the
combined loss. Phase D trains everything on the combined loss (plus the
proposal loss unless disabled).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backbone import backbone_forward
from .boxes import encode, iou_matrix
from .data.sample import Sample
from .heads import (
    BACKGROUND,
    classification_head,
    detection_head,
    segmentation_head,
    transfer_vector,
)
from .losses import box_loss, cross_entropy, l_cls, l_prop, mask_target
from .model import FTMTLNet, ModelConfig, init_weights
from .optim import Parameter, sgd_momentum_step, zero_grad
from .rpn import match_anchors, roi_align, rpn_objectness, select_candidates
from .tensor import Tensor, backward, concat, mean

log = logging.getLogger(__name__)

PHASES = ("B", "C", "D")
LOSS_COLUMNS = ("phase", "epoch", "batch", "l_prop", "l_cls", "l_box", "l_mask", "l_uni")


class TrainingAborted(RuntimeError):
    def __init__(self, phase: str, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss in phase {phase}, epoch {epoch}, batch {batch}: {detail}")
        self.phase, self.epoch, self.batch = phase, epoch, batch


@dataclass
class TrainConfig:
    lr: float = 0.005
    momentum: float = 0.9
    batch_size: int = 4
    epochs_rpn: int = 10
    epochs_heads: int = 10
    epochs_joint: int = 10
    lambdas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    rois_per_image: int = 16
    max_pos_fraction: float = 0.5
    prop_neg_ratio: float = 3.0
    prop_in_joint: bool = True
    gt_rois: bool = True
    min_forced_positives: int = 4
    jitter_rois: int = 4  # perturbed copies of each ground-truth box offered as positives
    jitter: float = 0.15
    cosine_lr: bool = False  # anneal lr over the epochs of each phase

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if any(l < 0 for l in self.lambdas):
            raise ValueError("loss weights must be non-negative")

    def epochs(self, phase: str) -> int:
        return {"B": self.epochs_rpn, "C": self.epochs_heads, "D": self.epochs_joint}[phase]


@dataclass
class TrainResult:
    model: FTMTLNet
    history: list[dict] = field(default_factory=list)
    rng: np.random.Generator | None = None
    phase: str = "A"


@dataclass
class RoiBatch:
    boxes: np.ndarray  # (R, 4) ROI boxes (anchors or ground truths)
    image_index: np.ndarray  # (R,)
    labels: np.ndarray  # (R,) 0 background, 1 benign, 2 malignant
    box_targets: np.ndarray  # (P, 4) deltas for the positive ROIs
    mask_targets: np.ndarray  # (P, 28, 28), for the ground-truth class channel
    positive: np.ndarray  # indices of positive ROIs


def _gt(sample: Sample):
    boxes = np.array([m.bbox.as_array() for m in sample.masses]).reshape(-1, 4)
    labels = np.array([m.class_index for m in sample.masses], dtype=np.int64)
    return boxes, labels


def jitter_boxes(boxes: np.ndarray, n: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` random perturbations of each center-size box: shifts and log-size changes up to ``scale``."""
    boxes = np.repeat(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), n, axis=0)
    u = rng.uniform(-scale, scale, size=boxes.shape)
    out = boxes.copy()
    out[:, 0] = boxes[:, 0] * np.exp(u[:, 0])
    out[:, 1] = boxes[:, 1] * np.exp(u[:, 1])
    out[:, 2] = boxes[:, 2] + u[:, 2] * boxes[:, 0]
    out[:, 3] = boxes[:, 3] + u[:, 3] * boxes[:, 1]
    return out


def sample_rois(
    anchors: np.ndarray, scores: np.ndarray, sample: Sample, mcfg: ModelConfig, tcfg: TrainConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Pick head-training ROIs for one image; returns ``(boxes, labels)``.

    Positives (IoU >= ``pos_iou``, ground-truth boxes first) fill at most
    ``max_pos_fraction`` of the budget. Negatives come from the selected
    candidates, then random low-overlap anchors.
    """
    gt_boxes, gt_labels = _gt(sample)
    cand = select_candidates(
        anchors, scores, mcfg.rpn_threshold, mcfg.top_n_train, gt_boxes, tcfg.min_forced_positives, mcfg.pos_iou
    )
    pool = [gt_boxes] if tcfg.gt_rois else []
    if tcfg.jitter_rois:
        pool.append(jitter_boxes(gt_boxes, tcfg.jitter_rois, tcfg.jitter, rng))
    n_gt = sum(len(b) for b in pool)  # ground-truth-derived rows come first
    boxes = np.concatenate(pool + [anchors[cand]], axis=0)
    ov = iou_matrix(boxes, gt_boxes)
    best = ov.max(axis=1)
    pos = np.flatnonzero(best >= mcfg.pos_iou)
    neg = np.flatnonzero(best < mcfg.pos_iou)
    budget = tcfg.rois_per_image
    head, rest = pos[pos < n_gt], rng.permutation(pos[pos >= n_gt])
    pos = np.concatenate([head, rest])[: max(1, int(budget * tcfg.max_pos_fraction))]
    neg = neg[: budget - len(pos)]
    chosen = [boxes[pos], boxes[neg]]
    short = budget - len(pos) - len(neg)
    if short > 0:
        anchor_best = iou_matrix(anchors, gt_boxes).max(axis=1)
        extra = np.setdiff1d(np.flatnonzero(anchor_best < mcfg.pos_iou), cand)
        if len(extra):
            chosen.append(anchors[np.sort(rng.choice(extra, size=min(short, len(extra)), replace=False))])
    rois = np.concatenate(chosen, axis=0)
    ov = iou_matrix(rois, gt_boxes)
    match = ov.argmax(axis=1)
    labels = np.where(ov.max(axis=1) >= mcfg.pos_iou, gt_labels[match], BACKGROUND)
    return rois, labels


def build_roi_batch(
    images: list[Sample], anchors: np.ndarray, scores: np.ndarray, mcfg: ModelConfig, tcfg: TrainConfig, rng
) -> RoiBatch:
    all_boxes, all_idx, all_labels, box_t, mask_t = [], [], [], [], []
    for i, s in enumerate(images):
        rois, labels = sample_rois(anchors, scores[i], s, mcfg, tcfg, rng)
        gt_boxes, _ = _gt(s)
        match = iou_matrix(rois, gt_boxes).argmax(axis=1)
        for r in np.flatnonzero(labels != BACKGROUND):
            g = match[r]
            box_t.append(encode(gt_boxes[g], rois[r])[0])
            mask_t.append(mask_target(s.masses[g].mask, rois[r]).astype(np.float32))
        all_boxes.append(rois)
        all_idx.append(np.full(len(rois), i))
        all_labels.append(labels)
    labels = np.concatenate(all_labels)
    return RoiBatch(
        np.concatenate(all_boxes),
        np.concatenate(all_idx),
        labels,
        np.array(box_t).reshape(-1, 4),
        np.array(mask_t).reshape(-1, 28, 28),
        np.flatnonzero(labels != BACKGROUND),
    )


def head_losses(model: FTMTLNet, p, theta0: Tensor, rb: RoiBatch) -> tuple[Tensor, Tensor, Tensor]:
    """Mean classification loss over all ROIs; box and mask losses over positives.

    The mask loss uses only the map of each positive's ground-truth class.
    """
    cfg = model.config
    theta1 = roi_align(theta0, rb.boxes, cfg.roi_size, sampling=cfg.roi_sampling, batch_index=rb.image_index)
    seg = segmentation_head(theta1, p)
    transfer = transfer_vector(seg, cfg.heads.stop_grad_weight_map) if cfg.heads.transfer else None
    probs = classification_head(theta1, transfer, p)
    loss_cls = mean(l_cls(probs, rb.labels))
    zero = Tensor(np.zeros((), dtype=theta0.dtype))
    if len(rb.positive) == 0:
        return loss_cls, zero, zero
    pos_theta1 = theta1[rb.positive]
    det = detection_head(pos_theta1, rb.boxes[rb.positive], p)
    loss_box = mean(box_loss(det.deltas, rb.box_targets))
    # only the ground-truth class's map is penalised
    channel = rb.labels[rb.positive] - 1
    loss_mask = mean(cross_entropy(seg.probs[rb.positive, channel], rb.mask_targets))
    return loss_cls, loss_box, loss_mask


def _group_by_shape(samples: list[Sample]) -> list[list[Sample]]:
    groups: dict[tuple, list[Sample]] = {}
    for s in samples:
        groups.setdefault(s.image.shape, []).append(s)
    return list(groups.values())


def batch_losses(model: FTMTLNet, samples: list[Sample], phase: str, tcfg: TrainConfig, rng) -> dict[str, Tensor]:
    """Loss tensors for one batch; images of differing size run as separate groups."""
    if phase == "C":
        p = model.frozen_tensors(("backbone", "rpn"))
    else:
        p = model.tensors()
    cfg = model.config
    totals = {"l_prop": [], "l_cls": [], "l_box": [], "l_mask": []}
    weights = []
    for group in _group_by_shape(samples):
        images = Tensor(np.stack([s.image for s in group]).astype(model.dtype))
        theta0 = backbone_forward(images, p, cfg.backbone).tensor
        anchors = model.anchors(*group[0].image.shape[-2:]).anchors
        scores = rpn_objectness(theta0, anchors, p)
        weights.append(len(group))
        if phase in ("B", "D"):
            props = []
            for i, s in enumerate(group):
                labels = match_anchors(anchors, _gt(s)[0], cfg.pos_iou, cfg.neg_iou)
                lp, _ = l_prop(scores[i], labels, rng, tcfg.prop_neg_ratio)
                props.append(lp.reshape((1,)))
            totals["l_prop"].append(mean(concat(props)))
        if phase in ("C", "D"):
            rb = build_roi_batch(group, anchors, scores.data, cfg, tcfg, rng)
            lc, lb, lm = head_losses(model, p, theta0, rb)
            totals["l_cls"].append(lc)
            totals["l_box"].append(lb)
            totals["l_mask"].append(lm)
    out = {}
    n = float(sum(weights))
    for key, parts in totals.items():
        if parts:
            acc = parts[0] * (weights[0] / n)
            for w, part in zip(weights[1:], parts[1:]):
                acc = acc + part * (w / n)
            out[key] = acc
    return out


def trainable(model: FTMTLNet, phase: str) -> list[Parameter]:
    if phase == "B":
        return model.group("backbone") + model.group("rpn")
    if phase == "C":
        return model.group("heads")
    return model.all_params()


def epoch_lr(tcfg: TrainConfig, epoch: int, n_epochs: int) -> float:
    """Learning rate for one epoch; constant unless ``cosine_lr`` is set."""
    if not tcfg.cosine_lr or n_epochs <= 1:
        return tcfg.lr
    return tcfg.lr * 0.5 * (1 + math.cos(math.pi * epoch / n_epochs))


def train_phase(
    model: FTMTLNet,
    samples: list[Sample],
    phase: str,
    tcfg: TrainConfig,
    rng: np.random.Generator,
    history: list[dict] | None = None,
    epochs: int | None = None,
    on_epoch: Callable[[str, int, float], None] | None = None,
) -> list[dict]:
    """Run one training phase in place; returns the per-batch loss rows."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    history = [] if history is None else history
    params = trainable(model, phase)
    for p in params:
        p.velocity[...] = 0
    zero_grad(model.all_params())
    lam = tcfg.lambdas
    n_epochs = tcfg.epochs(phase) if epochs is None else epochs
    for epoch in range(n_epochs):
        t0 = time.perf_counter()
        lr = epoch_lr(tcfg, epoch, n_epochs)
        order = rng.permutation(len(samples))
        epoch_loss = []
        for b, start in enumerate(range(0, len(samples), tcfg.batch_size)):
            batch = [samples[i] for i in order[start : start + tcfg.batch_size]]
            parts = batch_losses(model, batch, phase, tcfg, rng)
            row = {"phase": phase, "epoch": epoch, "batch": b}
            for key in ("l_prop", "l_cls", "l_box", "l_mask"):
                row[key] = float(parts[key].data) if key in parts else 0.0
            row["l_uni"] = lam[0] * row["l_cls"] + lam[1] * row["l_box"] + lam[2] * row["l_mask"]
            if phase == "B":
                total = parts["l_prop"]
            else:
                total = parts["l_cls"] * lam[0] + parts["l_box"] * lam[1] + parts["l_mask"] * lam[2]
                if phase == "D" and tcfg.prop_in_joint:
                    total = total + parts["l_prop"]
            if not all(math.isfinite(row[k]) for k in ("l_prop", "l_cls", "l_box", "l_mask")):
                raise TrainingAborted(phase, epoch, b, str(row))
            backward(total)
            sgd_momentum_step(params, lr, tcfg.momentum)
            zero_grad(model.all_params())
            history.append(row)
            epoch_loss.append(float(total.data))
        mean_loss = float(np.mean(epoch_loss)) if epoch_loss else float("nan")
        log.info("phase %s epoch %d: loss %.4f (%.1fs)", phase, epoch, mean_loss, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(phase, epoch, mean_loss)
    return history


def five_step_train(
    samples: list[Sample],
    model_config: ModelConfig | None = None,
    tcfg: TrainConfig | None = None,
    on_epoch: Callable[[str, int, float], None] | None = None,
) -> TrainResult:
    """Initialise (phase A) then run phases B, C and D in order."""
    tcfg = tcfg or TrainConfig()
    model = init_weights(FTMTLNet(model_config), tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    result = TrainResult(model, [], rng, "A")
    for phase in PHASES:
        train_phase(model, samples, phase, tcfg, rng, result.history, on_epoch=on_epoch)
        result.phase = phase
    return result
