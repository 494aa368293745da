"""Power-law fits on log-log axes with a robust exponent interval."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RateFit:
    xs: tuple[float, ...]
    ys: tuple[float, ...]
    exponent: float
    intercept: float
    r2: float
    ci: tuple[float, float]

    @property
    def amplitude(self) -> float:
        return math.exp(self.intercept)


def fit_rate(pairs) -> RateFit:
    """Ordinary least squares of log y on log x.

    The exponent interval comes from the spread of all pairwise slopes,
    median +- 1.57 IQR / sqrt(#pairs) (the notch heuristic); it degenerates
    to a point when the data is an exact power law.
    """
    pts = [(float(x), float(y)) for x, y in pairs]
    if len(pts) < 3:
        raise ValueError("need at least 3 points")
    if any(x <= 0 or y <= 0 for x, y in pts):
        raise ValueError("rate fits need positive coordinates")
    lx = np.log([p[0] for p in pts])
    ly = np.log([p[1] for p in pts])
    n = len(pts)
    mx, my = lx.mean(), ly.mean()
    sxx = float(((lx - mx) ** 2).sum())
    if sxx == 0:
        raise ValueError("x values must not all coincide")
    slope = float(((lx - mx) * (ly - my)).sum()) / sxx
    intercept = my - slope * mx
    resid = ly - (slope * lx + intercept)
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((ly - my) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - ss_res / ss_tot)

    slopes = []
    for i in range(n):
        for j in range(i + 1, n):
            if lx[i] != lx[j]:
                slopes.append((ly[j] - ly[i]) / (lx[j] - lx[i]))
    slopes = np.sort(np.array(slopes))
    med = float(np.median(slopes))
    q1, q3 = np.percentile(slopes, [25, 75])
    half = 1.57 * (q3 - q1) / math.sqrt(len(slopes))
    return RateFit(xs=tuple(p[0] for p in pts), ys=tuple(p[1] for p in pts),
                   exponent=slope, intercept=intercept, r2=r2,
                   ci=(med - half, med + half))
