from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..boxes import BoxCS, tight_bbox

LABELS = ("benign", "malignant")
CLASS_INDEX = {"benign": 1, "malignant": 2}


@dataclass
class MassAnnotation:
    bbox: BoxCS
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    label: str

    @classmethod
    def from_mask(cls, mask: np.ndarray, label: str) -> "MassAnnotation":
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")
        mask = (np.asarray(mask) > 0).astype(np.uint8)
        corners = tight_bbox(mask)
        if corners is None:
            raise ValueError("mass mask is empty")
        return cls(BoxCS.from_corners(*corners), mask, label)

    @property
    def class_index(self) -> int:
        return CLASS_INDEX[self.label]

    def corners(self) -> tuple[int, int, int, int]:
        return tuple(int(round(v)) for v in self.bbox.corners())


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    masses: list[MassAnnotation]
    id: str
    source_id: str = ""
    flags: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.source_id:
            self.source_id = self.id

    @property
    def height(self) -> int:
        return self.image.shape[-2]

    @property
    def width(self) -> int:
        return self.image.shape[-1]

    @property
    def label(self) -> str:
        return self.masses[0].label

    def with_flag(self, flag: str) -> "Sample":
        return replace(self, flags=self.flags | {flag})


def quantize16(image: np.ndarray) -> np.ndarray:
    """Snap intensities to the 16-bit grid so PNG storage is lossless."""
    return (np.round(np.clip(image, 0, 1) * 65535) / 65535).astype(np.float32)


def pad_to_multiple(sample: Sample, multiple: int = 16) -> Sample:
    """Zero-pad bottom/right so both image sides are multiples of ``multiple``."""
    h, w = sample.height, sample.width
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return sample
    image = np.pad(sample.image, ((0, 0), (0, ph), (0, pw)))
    masses = [MassAnnotation(m.bbox, np.pad(m.mask, ((0, ph), (0, pw))), m.label) for m in sample.masses]
    return replace(sample, image=image, masses=masses)
