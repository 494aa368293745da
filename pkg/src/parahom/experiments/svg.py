"""Minimal deterministic SVG plots: log-log scatter with a fitted line.

Pure function of the data (no timestamps, no library state), so plots can
be regenerated offline from the CSVs and compared byte for byte.
"""

from __future__ import annotations

import math
from pathlib import Path

W, H = 480, 360
MARGIN = 52


def _ticks(lo: float, hi: float):
    a = math.floor(lo)
    b = math.ceil(hi)
    step = max(1, (b - a) // 6)
    return list(range(a, b + 1, step))


def loglog_plot(path, xs, ys, exponent=None, intercept=None,
                title="", xlabel="x", ylabel="y") -> Path:
    if len(xs) != len(ys) or not xs:
        raise ValueError("need matching nonempty coordinate lists")
    if any(v <= 0 for v in xs) or any(v <= 0 for v in ys):
        raise ValueError("log-log plot needs positive data")
    lx = [math.log10(v) for v in xs]
    ly = [math.log10(v) for v in ys]
    x0, x1 = min(lx) - 0.15, max(lx) + 0.15
    y0, y1 = min(ly) - 0.15, max(ly) + 0.15
    if x1 - x0 < 1e-9:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 - y0 < 1e-9:
        y0, y1 = y0 - 0.5, y1 + 0.5

    def px(v):
        return MARGIN + (v - x0) / (x1 - x0) * (W - 2 * MARGIN)

    def py(v):
        return H - MARGIN - (v - y0) / (y1 - y0) * (H - 2 * MARGIN)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{W - 2 * MARGIN}" '
        f'height="{H - 2 * MARGIN}" fill="none" stroke="black"/>',
        f'<text x="{W // 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{W // 2}" y="{H - 8}" text-anchor="middle" font-size="11">{xlabel}</text>',
        f'<text x="14" y="{H // 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {H // 2})">{ylabel}</text>',
    ]
    for t in _ticks(x0, x1):
        if x0 <= t <= x1:
            parts.append(f'<line x1="{px(t):.2f}" y1="{H - MARGIN}" x2="{px(t):.2f}" '
                         f'y2="{H - MARGIN + 4}" stroke="black"/>')
            parts.append(f'<text x="{px(t):.2f}" y="{H - MARGIN + 16}" '
                         f'text-anchor="middle" font-size="10">1e{t}</text>')
    for t in _ticks(y0, y1):
        if y0 <= t <= y1:
            parts.append(f'<line x1="{MARGIN - 4}" y1="{py(t):.2f}" x2="{MARGIN}" '
                         f'y2="{py(t):.2f}" stroke="black"/>')
            parts.append(f'<text x="{MARGIN - 6}" y="{py(t):.2f}" text-anchor="end" '
                         f'font-size="10">1e{t}</text>')
    if exponent is not None and intercept is not None:
        ln10 = math.log(10.0)
        ya = (exponent * x0 * ln10 + intercept) / ln10
        yb = (exponent * x1 * ln10 + intercept) / ln10
        parts.append(f'<line x1="{px(x0):.2f}" y1="{py(ya):.2f}" x2="{px(x1):.2f}" '
                     f'y2="{py(yb):.2f}" stroke="steelblue" stroke-width="1.5"/>')
        parts.append(f'<text x="{W - MARGIN}" y="{MARGIN - 6}" text-anchor="end" '
                     f'font-size="11">slope {exponent:.4f}</text>')
    for vx, vy in zip(lx, ly):
        parts.append(f'<circle cx="{px(vx):.2f}" cy="{py(vy):.2f}" r="3.2" '
                     f'fill="crimson"/>')
    parts.append("</svg>")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("\n".join(parts) + "\n")
    return p
