"""Curve tables on disk (CSV) and as deterministic SVG plots.

Error bars are drawn at ``y +/- 2 * stderr``, the usual two-sigma whisker.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import CurveTable

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
WIDTH, HEIGHT = 480, 360
MARGIN = (56, 20, 24, 48)  # left, right, top, bottom


class CurveFormatError(ValueError):
    pass


def write_curve_csv(curve: CurveTable, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([curve.x_label, curve.y_label, "stderr"])
    for x, y, s in zip(curve.x, curve.y, curve.stderr):
        w.writerow([repr(float(x)), repr(float(y)), repr(float(s))])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_curve_csv(path) -> CurveTable:
    """Parse a curve CSV; raises :class:`CurveFormatError` on malformed content."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise CurveFormatError(f"{path}: not UTF-8 text") from e
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows or len(rows[0]) != 3:
        raise CurveFormatError(f"{path}: expected a 3-column header row")
    try:
        vals = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, 3)
    except ValueError as e:
        raise CurveFormatError(f"{path}: {e}") from None
    if len(vals) == 0:
        raise CurveFormatError(f"{path}: no data rows")
    if not np.all(np.isfinite(vals)):
        raise CurveFormatError(f"{path}: non-finite value")
    try:
        return CurveTable(vals[:, 0], vals[:, 1], vals[:, 2], rows[0][0], rows[0][1])
    except ValueError as e:
        raise CurveFormatError(f"{path}: {e}") from None


@dataclass(frozen=True)
class PlotFrame:
    """Maps data coordinates into the SVG canvas."""

    x0: float
    x1: float
    y0: float
    y1: float

    def px(self, x) -> float:
        left, right = MARGIN[0], WIDTH - MARGIN[1]
        span = self.x1 - self.x0 or 1.0
        return left + (x - self.x0) / span * (right - left)

    def py(self, y) -> float:
        top, bottom = MARGIN[2], HEIGHT - MARGIN[3]
        span = self.y1 - self.y0 or 1.0
        return bottom - (y - self.y0) / span * (bottom - top)


def frame_for(curves: Sequence[CurveTable]) -> PlotFrame:
    xs = np.concatenate([c.x for c in curves])
    lo = np.concatenate([c.y - 2 * c.stderr for c in curves])
    hi = np.concatenate([c.y + 2 * c.stderr for c in curves])
    x0, x1 = min(0.0, float(xs.min())), max(float(xs.max()), 1e-9)
    if x1 == x0:
        x1 = x0 + 1.0
    return PlotFrame(x0, x1, min(0.0, float(lo.min())), max(1.0, float(hi.max())))


def _f(v: float) -> str:
    return f"{v:.3f}"


def render_svg(curves: Sequence[CurveTable], names: Sequence[str] | None = None, title: str = "") -> str:
    """SVG text for one or more curves on shared axes."""
    if not curves:
        raise ValueError("nothing to plot")
    names = list(names) if names is not None else [f"curve {i + 1}" for i in range(len(curves))]
    fr = frame_for(curves)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    left, right, top, bottom = MARGIN[0], WIDTH - MARGIN[1], MARGIN[2], HEIGHT - MARGIN[3]
    out.append(f'<line class="axis" x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>')
    out.append(f'<line class="axis" x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>')
    for t in np.linspace(fr.x0, fr.x1, 6):
        out.append(f'<text x="{_f(fr.px(t))}" y="{bottom + 16}" font-size="10" text-anchor="middle">{t:.2f}</text>')
    for t in np.linspace(fr.y0, fr.y1, 6):
        out.append(f'<text x="{left - 6}" y="{_f(fr.py(t) + 3)}" font-size="10" text-anchor="end">{t:.2f}</text>')
    out.append(f'<text x="{(left + right) / 2}" y="{HEIGHT - 8}" font-size="12" text-anchor="middle">{curves[0].x_label}</text>')
    out.append(
        f'<text x="14" y="{(top + bottom) / 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {(top + bottom) / 2})">{curves[0].y_label}</text>'
    )
    if title:
        out.append(f'<text x="{(left + right) / 2}" y="16" font-size="12" text-anchor="middle">{title}</text>')
    for i, (c, name) in enumerate(zip(curves, names)):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_f(fr.px(x))},{_f(fr.py(y))}" for x, y in zip(c.x, c.y))
        out.append(f'<g class="curve" data-name="{name}">')
        if len(c.x) > 1:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in zip(c.x, c.y):
            out.append(f'<circle cx="{_f(fr.px(x))}" cy="{_f(fr.py(y))}" r="2" fill="{color}"/>')
        for x, y, s in zip(c.x, c.y, c.stderr):
            if s > 0:
                out.append(
                    f'<line class="whisker" x1="{_f(fr.px(x))}" y1="{_f(fr.py(y - 2 * s))}" '
                    f'x2="{_f(fr.px(x))}" y2="{_f(fr.py(y + 2 * s))}" stroke="{color}"/>'
                )
        out.append("</g>")
        ly = top + 14 * (i + 1)
        out.append(f'<text x="{right - 4}" y="{ly}" font-size="10" text-anchor="end" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(curves: Sequence[CurveTable], path, names=None, title: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_svg(curves, names, title), encoding="utf-8")
    return path
