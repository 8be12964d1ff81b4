"""Dataset directory format.

``manifest.jsonl`` holds one JSON record per sample::

    {"id": ..., "image": "images/<id>.png",
     "masses": [{"mask": "masks/<id>_0.png", "label": "benign", "bbox": [x1, y1, x2, y2]}]}

Images are 16-bit grayscale PNGs, masks 8-bit PNGs (0 / 255). Coordinates are
pixels, origin top-left, y down, with exclusive ``x2``/``y2``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from ..boxes import BoxCS
from .sample import LABELS, MassAnnotation, Sample

MANIFEST = "manifest.jsonl"


class DatasetError(ValueError):
    def __init__(self, sample_id: str, message: str):
        super().__init__(f"sample {sample_id!r}: {message}")
        self.sample_id = sample_id


def save_dataset(samples: list[Sample], directory) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img16 = np.round(np.clip(s.image[0], 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(img16).save(root / "images" / f"{s.id}.png")
        masses = []
        for k, m in enumerate(s.masses):
            rel = f"masks/{s.id}_{k}.png"
            Image.fromarray((m.mask > 0).astype(np.uint8) * 255).save(root / rel)
            masses.append({"mask": rel, "label": m.label, "bbox": [int(round(v)) for v in m.bbox.corners()]})
        record = {"id": s.id, "image": f"images/{s.id}.png", "masses": masses}
        if s.source_id != s.id:
            record["source_id"] = s.source_id
        lines.append(json.dumps(record, sort_keys=True))
    (root / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def _read_png(path: Path, sample_id: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(sample_id, f"missing file {path}")
    try:
        with Image.open(path) as im:
            return np.array(im)
    except OSError as exc:
        raise DatasetError(sample_id, f"unreadable image {path}: {exc}") from exc


def load_dataset(directory) -> list[Sample]:
    root = Path(directory)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    samples = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid = rec["id"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetError(f"<line {lineno}>", f"corrupt manifest record: {exc}") from exc
        try:
            image_rel, mass_recs = rec["image"], rec["masses"]
        except KeyError as exc:
            raise DatasetError(sid, f"manifest record lacks {exc}") from exc
        raw = _read_png(root / image_rel, sid)
        if raw.ndim != 2:
            raise DatasetError(sid, f"image must be single-channel, got shape {raw.shape}")
        scale = 65535.0 if raw.dtype == np.uint16 or raw.max() > 255 else 255.0
        image = (raw.astype(np.float64) / scale).astype(np.float32)[None]
        masses = []
        for m in mass_recs:
            try:
                mask_rel, label, bbox = m["mask"], m["label"], m["bbox"]
            except (KeyError, TypeError) as exc:
                raise DatasetError(sid, f"corrupt mass record: {exc}") from exc
            if label not in LABELS:
                raise DatasetError(sid, f"unknown label {label!r}")
            mask = _read_png(root / mask_rel, sid)
            if mask.shape != image.shape[1:]:
                raise DatasetError(sid, f"mask shape {mask.shape} does not match image shape {image.shape[1:]}")
            mask = (mask > 0).astype(np.uint8)
            if not mask.any():
                raise DatasetError(sid, f"mask {mask_rel} is empty")
            if len(bbox) != 4 or bbox[2] <= bbox[0] or bbox[3] <= bbox[1]:
                raise DatasetError(sid, f"invalid bbox {bbox}")
            masses.append(MassAnnotation(BoxCS.from_corners(*bbox), mask, label))
        samples.append(Sample(image, masses, sid, rec.get("source_id", "")))
    return samples
