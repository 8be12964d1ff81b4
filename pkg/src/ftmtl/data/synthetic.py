"""Synthetic mammogram-like images with benign and malignant masses.

Benign masses are smooth ellipses whose intensity falls off softly towards
the border. Malignant masses are spiculated stars (8-14 spikes) with a jagged
outline. The background is a low-frequency noise field with fine texture.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .sample import MassAnnotation, Sample, quantize16


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8, mode="wrap")
    coarse = (coarse - coarse.min()) / (np.ptp(coarse) + 1e-12)
    fine = gaussian_filter(rng.standard_normal((size, size)), sigma=0.8)
    return 0.2 + 0.22 * coarse + 0.03 * fine / (fine.std() + 1e-12)


def _ellipse(rng: np.random.Generator, size: int, yy, xx, cx, cy):
    a, b = rng.uniform(7.0, 14.0), rng.uniform(7.0, 14.0)
    t = rng.uniform(0, np.pi)
    dx, dy = xx - cx, yy - cy
    u = (dx * np.cos(t) + dy * np.sin(t)) / a
    v = (-dx * np.sin(t) + dy * np.cos(t)) / b
    r = np.sqrt(u * u + v * v)
    mask = r <= 1.0
    profile = np.clip(1.0 - r, 0, 1) ** 0.6
    return mask, rng.uniform(0.28, 0.42) * profile


def _star(rng: np.random.Generator, size: int, yy, xx, cx, cy):
    k = int(rng.integers(8, 15))
    r_core = rng.uniform(6.0, 10.0)
    r_spike = r_core * rng.uniform(1.35, 1.7)
    angles = np.sort(rng.uniform(0, 2 * np.pi, 1) + np.arange(2 * k) * np.pi / k + rng.normal(0, 0.08, 2 * k))
    radii = np.where(np.arange(2 * k) % 2 == 0, r_spike, r_core) * rng.uniform(0.85, 1.15, 2 * k)
    dx, dy = xx - cx, yy - cy
    phi = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    a = np.mod(angles, 2 * np.pi)
    order = np.argsort(a)
    a, radii = a[order], radii[order]
    a_ext = np.concatenate([a[-1:] - 2 * np.pi, a, a[:1] + 2 * np.pi])
    r_ext = np.concatenate([radii[-1:], radii, radii[:1]])
    boundary = np.interp(phi, a_ext, r_ext)
    d = np.sqrt(dx * dx + dy * dy)
    mask = d <= boundary
    profile = np.where(mask, 0.85 + 0.15 * np.clip(1 - d / r_core, 0, 1), 0.0)
    return mask, rng.uniform(0.3, 0.44) * profile, r_spike * 1.15


def synth_sample(rng: np.random.Generator, label: str, size: int = 64, sample_id: str = "s", n_masses: int = 1) -> Sample:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    image = _background(rng, size)
    masses = []
    for _ in range(n_masses):
        for _attempt in range(50):
            margin = 17.0
            cx, cy = rng.uniform(margin, size - margin, 2)
            if label == "benign":
                mask, layer = _ellipse(rng, size, yy, xx, cx, cy)
            else:
                mask, layer, _ = _star(rng, size, yy, xx, cx, cy)
            if mask.sum() and not any(np.any(mask & (m.mask > 0)) for m in masses):
                break
        image = image + gaussian_filter(layer, 0.7 if label == "benign" else 0.3)
        masses.append(MassAnnotation.from_mask(mask, label))
    return Sample(quantize16(image)[None], masses, sample_id)


def generate_synthetic(
    n: int, seed: int = 0, benign_fraction: float = 0.5, image_size: int = 64, masses_per_image: int = 1
) -> list[Sample]:
    """``n`` samples; exactly ``round(n * benign_fraction)`` of them benign.

    Every sample is drawn from its own generator seeded by ``(seed, index)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if image_size % 16 or image_size < 48:
        raise ValueError("image_size must be a multiple of 16 and at least 48")
    if not 0.0 <= benign_fraction <= 1.0:
        raise ValueError("benign_fraction must lie in [0, 1]")
    n_benign = int(round(n * benign_fraction))
    labels = np.array(["benign"] * n_benign + ["malignant"] * (n - n_benign))
    labels = labels[np.random.default_rng([seed, 2**31 - 1]).permutation(n)]
    return [
        synth_sample(np.random.default_rng([seed, i]), str(labels[i]), image_size, f"syn{seed}_{i:05d}", masses_per_image)
        for i in range(n)
    ]
