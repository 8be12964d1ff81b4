"""Per-mass splitting, breast-region cropping, augmentation and folds."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .sample import MassAnnotation, Sample, pad_to_multiple, quantize16

log = logging.getLogger(__name__)

AUGMENT_OPS = ("rotate", "flip", "zoom", "crop", "contrast", "smooth")
GEOMETRIC_OPS = frozenset({"rotate", "flip", "zoom", "crop"})


def crop_breast_region(sample: Sample, threshold: float = 0.05, multiple: int = 16) -> Sample:
    """Crop to pixels above ``threshold * max`` intensity, then pad to ``multiple``.

    An image without foreground comes back unchanged, flagged ``no_foreground``.
    """
    img = sample.image[0]
    peak = float(img.max())
    fg = img > threshold * peak if peak > 0 else np.zeros_like(img, dtype=bool)
    if not fg.any():
        log.warning("sample %s has no foreground; left uncropped", sample.id)
        return sample.with_flag("no_foreground")
    ys, xs = np.nonzero(fg)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    masses = []
    for m in sample.masses:
        mask = m.mask[y0:y1, x0:x1]
        if not mask.any():
            log.warning("sample %s: mass outside the breast region dropped", sample.id)
            continue
        masses.append(MassAnnotation.from_mask(mask, m.label))
    cropped = replace(sample, image=sample.image[:, y0:y1, x0:x1].copy(), masses=masses)
    return pad_to_multiple(cropped, multiple)


def split_per_mass(samples: list[Sample]) -> list[Sample]:
    """One output sample per (image, mass) pair; mass-free images are dropped."""
    out = []
    for s in samples:
        if not s.masses:
            log.warning("sample %s has no masses; dropped", s.id)
            continue
        if len(s.masses) == 1:
            out.append(s)
            continue
        for k, m in enumerate(s.masses):
            out.append(replace(s, masses=[m], id=f"{s.id}_m{k}", source_id=f"{s.source_id}_m{k}"))
    return out


# -- augmentation -----------------------------------------------------------


def _fit_canvas(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Centre-crop or zero-pad a 2-D array to ``h x w``."""
    out = np.zeros((h, w), dtype=arr.dtype)
    sh, sw = arr.shape
    src_y, dst_y = max(0, (sh - h) // 2), max(0, (h - sh) // 2)
    src_x, dst_x = max(0, (sw - w) // 2), max(0, (w - sw) // 2)
    ch, cw = min(h, sh), min(w, sw)
    out[dst_y : dst_y + ch, dst_x : dst_x + cw] = arr[src_y : src_y + ch, src_x : src_x + cw]
    return out


def _geometric(op: str, image: np.ndarray, masks: list[np.ndarray], rng: np.random.Generator):
    if op == "flip":
        axis = int(rng.integers(0, 2))
        return np.flip(image, axis).copy(), [np.flip(m, axis).copy() for m in masks]
    if op == "rotate":
        if rng.random() < 0.5:
            k = int(rng.integers(1, 4))
            return np.rot90(image, k).copy(), [np.rot90(m, k).copy() for m in masks]
        angle = float(rng.uniform(-15, 15))
        img = ndimage.rotate(image, angle, reshape=False, order=1, mode="nearest")
        return img, [ndimage.rotate(m, angle, reshape=False, order=0, mode="constant") for m in masks]
    if op == "zoom":
        f = float(rng.uniform(0.8, 1.2))
        h, w = image.shape
        img = _fit_canvas(ndimage.zoom(image, f, order=1, mode="nearest"), h, w)
        return img, [_fit_canvas(ndimage.zoom(m, f, order=0), h, w) for m in masks]
    if op == "crop":
        h, w = image.shape
        ys, xs = np.nonzero(np.any(np.stack(masks), axis=0)) if masks else (np.array([0]), np.array([0]))
        my0, my1, mx0, mx1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        ch = int(rng.integers(max(int(np.ceil(0.7 * h)), my1 - my0), h + 1))
        min_w = max(int(np.ceil(0.7 * h * w / ch)), mx1 - mx0)
        cw = int(rng.integers(min(min_w, w), w + 1))
        y0 = int(rng.integers(max(0, my1 - ch), min(my0, h - ch) + 1))
        x0 = int(rng.integers(max(0, mx1 - cw), min(mx0, w - cw) + 1))
        return image[y0 : y0 + ch, x0 : x0 + cw].copy(), [m[y0 : y0 + ch, x0 : x0 + cw].copy() for m in masks]
    raise ValueError(op)


def _intensity(op: str, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if op == "contrast":
        return np.clip(image, 0, 1) ** float(rng.uniform(0.7, 1.4))
    if op == "smooth":
        return ndimage.gaussian_filter(image, float(rng.uniform(0.5, 1.5)))
    raise ValueError(op)


def apply_ops(sample: Sample, ops, rng: np.random.Generator) -> Sample | None:
    """Apply the named ops in order; ``None`` if a mass leaves the frame."""
    image = sample.image[0].astype(np.float64)
    masks = [m.mask.copy() for m in sample.masses]
    for op in ops:
        if op in GEOMETRIC_OPS:
            image, masks = _geometric(op, image, masks, rng)
        else:
            image = _intensity(op, image, rng)
    if any(not m.any() for m in masks):
        return None
    masses = [MassAnnotation.from_mask(m, a.label) for m, a in zip(masks, sample.masses)]
    return pad_to_multiple(replace(sample, image=quantize16(image)[None], masses=masses))


def augment(sample: Sample, rng: np.random.Generator, max_retries: int = 10) -> Sample | None:
    """Apply 2-5 distinct operations drawn uniformly from :data:`AUGMENT_OPS`.

    Returns ``None`` (after logging a warning) when every retry removed a mass
    from the frame.
    """
    for _ in range(max_retries):
        k = int(rng.integers(2, 6))
        ops = [AUGMENT_OPS[i] for i in rng.choice(len(AUGMENT_OPS), size=k, replace=False)]
        out = apply_ops(sample, ops, rng)
        if out is not None:
            return out
    log.warning("augmentation of %s skipped: mass left the frame in %d attempts", sample.id, max_retries)
    return None


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode("utf-8"))])


def build_training_set(samples: list[Sample], benign_reps: int = 20, malignant_reps: int = 10, seed: int = 0) -> list[Sample]:
    """Originals plus ``*_reps`` augmented copies per sample, by class."""
    if benign_reps < 0 or malignant_reps < 0:
        raise ValueError("repetition counts must be >= 0")
    out = []
    for s in samples:
        out.append(s)
        reps = benign_reps if s.label == "benign" else malignant_reps
        rng = sample_rng(seed, s.id)
        for r in range(reps):
            aug = augment(s, rng)
            if aug is not None:
                out.append(replace(aug, id=f"{s.id}_aug{r:03d}", source_id=s.source_id))
    return out


# -- cross validation -------------------------------------------------------


@dataclass
class FoldSplit:
    k: int
    train_ids: list[list[str]]
    test_ids: list[list[str]]
    stratified: bool = True

    def fold(self, i: int) -> tuple[list[str], list[str]]:
        return self.train_ids[i], self.test_ids[i]


def kfold(samples: list[Sample], k: int = 5, seed: int = 0) -> FoldSplit:
    """Label-stratified k-fold partition of sample ids.

    Each class is shuffled and the concatenated classes are dealt round-robin,
    so fold sizes differ by at most one and so do per-class counts.
    """
    if len(samples) < k:
        raise ValueError(f"need at least k={k} samples, got {len(samples)}")
    rng = np.random.default_rng(seed)
    labels = sorted({s.label for s in samples})
    by_label = {lab: [s.id for s in samples if s.label == lab] for lab in labels}
    stratified = all(len(v) >= k for v in by_label.values())
    if stratified:
        order = [sid for lab in labels for sid in rng.permutation(by_label[lab]).tolist()]
    else:
        log.warning("a class has fewer than %d members; falling back to an unstratified split", k)
        order = rng.permutation([s.id for s in samples]).tolist()
    test = [order[i::k] for i in range(k)]
    train = [[sid for j, t in enumerate(test) if j != i for sid in t] for i in range(k)]
    return FoldSplit(k, train, test, stratified)
