"""Monotone envelopes and parabolic subdifferential measures.

The monotone envelope of u over a space-time box is the largest function
below u that is convex in space and non-increasing in time. A plane
p.x + h lies below u(y, s) for all s <= t exactly when it lies below the
running temporal minimum m_t = min_{s<=t} u(., s), so the envelope at time
t is the spatial convex envelope of m_t. That reduction is the core
algorithmic commitment here: running minimum along time, then exact lower
convex hulls slice by slice.

The normalized measure of the subdifferential set is computed two
independent ways:

* fiber sweep: for each slope p on a grid, h_p(t) = min over earlier nodes
  of (u - p.x) is non-increasing; descents attained at interior nodes
  accumulate the fiber length of {h : (p, h) attained inside}. When the
  lateral boundary values are constant in time every descent is attained
  at a fresh interior value, so the fiber telescopes to
  h_p(t_0) - h_p(t_end) and only the initial slice and the per-node
  running minimum are needed (the fast path used on deep cubes).
* contact-form quadrature: -dΓ/dt * det D^2 Γ integrated over the contact
  set {u = Γ}, the discrete parabolic Monge-Ampere density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from ._kernels import lower_hull_1d
from .lattice import Field, GridSpec

MAX_SLOPES = 2_000_000


@dataclass
class EnvelopeResult:
    gamma: Field
    contact: np.ndarray
    contact_tol: float


@dataclass(frozen=True)
class SubdiffMeasure:
    """Normalized subdifferential measure |P(Q; Gamma^u)| / |Q|."""

    value: float
    slope_step: float
    slope_count: int
    lip_bound: float
    method: str


def running_min(field: Field) -> Field:
    vals = np.minimum.accumulate(field.values, axis=0)
    return Field(field.grid, vals, field.boundary.copy())


def convex_envelope_slice(values: np.ndarray) -> np.ndarray:
    """Largest discretely convex function below `values` on a uniform grid
    (1-d array) or product grid (2-d array): the lower convex hull of the
    graph, evaluated at the nodes."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        idx = lower_hull_1d(v)
        env = np.interp(np.arange(v.shape[0]), idx, v[idx])
        return np.minimum(env, v)
    if v.ndim == 2:
        return _envelope_2d(v)
    raise ValueError("only 1-d and 2-d slices are supported")


def _envelope_2d(v: np.ndarray) -> np.ndarray:
    ny, nx = v.shape
    I, J = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    pts = np.column_stack([I.ravel(), J.ravel(), v.ravel()]).astype(float)
    # affine slices have a degenerate (planar) hull; detect and return as is
    A = np.column_stack([pts[:, 0], pts[:, 1], np.ones(len(pts))])
    coef, *_ = np.linalg.lstsq(A, pts[:, 2], rcond=None)
    resid = np.max(np.abs(A @ coef - pts[:, 2]))
    scale = 1.0 + float(np.max(np.abs(v)))
    if resid <= 1e-12 * scale:
        return v.copy()
    try:
        hull = ConvexHull(pts)
    except QhullError:
        if resid <= 1e-9 * scale:
            return v.copy()
        raise
    eq = hull.equations  # a*x + b*y + c*z + off <= 0 inside
    lower = eq[eq[:, 2] < -1e-12]
    # each lower facet plane z = -(a x + b y + off)/c minorizes all points;
    # the envelope is their pointwise maximum
    planes = -(lower[:, [0, 1, 3]]) / lower[:, 2:3]
    env = pts[:, 0:2] @ planes[:, 0:2].T + planes[:, 2]
    env = env.max(axis=1).reshape(ny, nx)
    return np.minimum(env, v)


def monotone_envelope(field: Field) -> EnvelopeResult:
    """Slice-wise convex envelope of the running temporal minimum, with the
    contact mask {|u - Gamma| <= 1e-8 (1 + sup|u|)}."""
    m = np.minimum.accumulate(field.values, axis=0)
    gamma = np.empty_like(m)
    for k in range(m.shape[0]):
        gamma[k] = convex_envelope_slice(m[k])
    tol = 1e-8 * (1.0 + float(np.max(np.abs(field.values))))
    contact = np.abs(field.values - gamma) <= tol
    gfield = Field(field.grid, gamma, field.boundary.copy())
    return EnvelopeResult(gamma=gfield, contact=contact, contact_tol=tol)


# ------------------------------------------------------------------- fibers


def _flat_coords(grid: GridSpec) -> np.ndarray:
    axes = [grid.axis(a) for a in range(grid.dimension)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _spatial_lip(arr: np.ndarray, grid: GridSpec) -> float:
    """Max abs forward difference / dx along spatial axes; arr may carry a
    leading time axis."""
    worst = 0.0
    off = arr.ndim - grid.dimension
    for a in range(grid.dimension):
        d = np.diff(arr, axis=off + a)
        if d.size:
            worst = max(worst, float(np.max(np.abs(d))) / grid.dx)
    return worst


def _slope_grid(lip: float, dp: float, d: int) -> np.ndarray:
    kmax = int(math.ceil(lip / dp))
    ks = np.arange(-kmax, kmax + 1, dtype=float) * dp
    if d == 1:
        P = ks[:, None]
    else:
        a, b = np.meshgrid(ks, ks, indexing="ij")
        P = np.column_stack([a.ravel(), b.ravel()])
    if P.shape[0] > MAX_SLOPES:
        raise ValueError(f"slope grid of {P.shape[0]} points; field looks singular")
    return P


def fiber_measure_from_extremes(u0: np.ndarray, run_min: np.ndarray, grid: GridSpec,
                                slope_step: Optional[float] = None) -> SubdiffMeasure:
    """Fast fiber measure for time-constant lateral data:
    fiber(p) = min(u0 - p.x) - min(run_min - p.x), summed over the slope grid.

    Valid because with constant lateral data a strict descent of h_p can only
    be attained at a spatially interior node after the initial time (lateral
    values are already present in slice 0), so every descent counts; beyond
    the Lipschitz constant of run_min both minima sit at the same boundary
    corner and the fiber vanishes.
    """
    dp = float(slope_step) if slope_step is not None else grid.dx
    if dp <= 0:
        raise ValueError("slope step must be positive")
    lip = max(_spatial_lip(run_min, grid), 1e-300)
    P = _slope_grid(lip + 2 * dp, dp, grid.dimension)
    X = _flat_coords(grid)
    px = P @ X.T  # (n_slopes, n_nodes)
    g0 = (u0.ravel()[None, :] - px).min(axis=1)
    gK = (run_min.ravel()[None, :] - px).min(axis=1)
    fiber = g0 - gK
    value = float(fiber.sum()) * dp ** grid.dimension / grid.box_volume
    return SubdiffMeasure(value=value, slope_step=dp, slope_count=P.shape[0],
                          lip_bound=lip, method="fiber")


def subdiff_measure_fiber(field: Field, slope_step: Optional[float] = None,
                          window: Optional[np.ndarray] = None,
                          force_full_sweep: bool = False,
                          return_g: bool = False):
    """Fiber-sweep measure of the parabolic subdifferential of `field`.

    Descents of the per-slope running minimum h_p(t_k) are accumulated when
    the new minimum is attained at a node of the open cylinder (spatially
    interior, k >= 1); ties between interior and boundary attainment count
    as interior. `window` (boolean over the space-time nodes) restricts
    attainment membership while minima still range over the whole field,
    realizing the ambient-cube reading of P(Q'; u). With `return_g` the full
    per-slope sequences (n_slopes, steps+1) are returned alongside.
    """
    grid = field.grid
    dp = float(slope_step) if slope_step is not None else grid.dx
    if dp <= 0:
        raise ValueError("slope step must be positive")
    if window is None and not force_full_sweep and not return_g \
            and field.lateral_time_constant():
        return fiber_measure_from_extremes(field.values[0], field.running_min_final(),
                                           grid, dp)

    lip = max(_spatial_lip(field.values, grid), 1e-300)
    P = _slope_grid(lip + 2 * dp, dp, grid.dimension)
    X = _flat_coords(grid)
    px = P @ X.T
    interior = field.spatial_interior_mask().ravel()
    if window is not None:
        if window.shape != field.values.shape:
            raise ValueError("window must cover the space-time nodes")

    vals0 = field.values[0].ravel()[None, :] - px
    g = vals0.min(axis=1)
    gs = [g.copy()] if return_g else None
    fiber = np.zeros(P.shape[0])
    big = np.inf
    for k in range(1, grid.steps + 1):
        vals = field.values[k].ravel()[None, :] - px
        m_all = vals.min(axis=1)
        allowed = interior if window is None else interior & window[k].ravel()
        if allowed.any():
            m_int = np.where(allowed[None, :], vals, big).min(axis=1)
        else:
            m_int = np.full(P.shape[0], big)
        improved = m_all < g
        # interior wins ties; the comparison carries an fp tolerance so exact
        # analytic ties are not lost to 1-ulp rounding
        tie = m_all + 1e-12 * (1.0 + np.abs(m_all))
        counted = improved & (m_int <= tie)
        fiber[counted] += g[counted] - m_all[counted]
        g = np.minimum(g, m_all)
        if return_g:
            gs.append(g.copy())
    value = float(fiber.sum()) * dp ** grid.dimension / grid.box_volume
    meas = SubdiffMeasure(value=value, slope_step=dp, slope_count=P.shape[0],
                          lip_bound=lip, method="fiber")
    if return_g:
        return meas, np.array(gs).T, P
    return meas


# ------------------------------------------------------------------ contact


def subdiff_measure_contact(env_result: EnvelopeResult) -> SubdiffMeasure:
    """Quadrature of max(0, -D_t Gamma) * max(0, det D_h^2 Gamma) over the
    interior contact nodes (backward time difference; diagonal curvature
    entries clamped at zero against discretization noise)."""
    gamma = env_result.gamma
    grid = gamma.grid
    G = gamma.values
    d = grid.dimension
    dt_term = np.maximum(0.0, (G[:-1] - G[1:]) / grid.dt)  # at slices 1..K
    inv_dx2 = 1.0 / (grid.dx * grid.dx)
    if d == 1:
        sec = np.maximum(0.0, (G[1:, :-2] - 2.0 * G[1:, 1:-1] + G[1:, 2:]) * inv_dx2)
        det = sec
        density = dt_term[:, 1:-1] * det
        mask = env_result.contact[1:, 1:-1]
    else:
        gyy = np.maximum(0.0, (G[1:, :-2, 1:-1] - 2.0 * G[1:, 1:-1, 1:-1]
                               + G[1:, 2:, 1:-1]) * inv_dx2)
        gxx = np.maximum(0.0, (G[1:, 1:-1, :-2] - 2.0 * G[1:, 1:-1, 1:-1]
                               + G[1:, 1:-1, 2:]) * inv_dx2)
        gxy = (G[1:, 2:, 2:] + G[1:, :-2, :-2] - G[1:, 2:, :-2] - G[1:, :-2, 2:]) \
            * (0.25 * inv_dx2)
        det = np.maximum(0.0, gyy * gxx - gxy * gxy)
        density = dt_term[:, 1:-1, 1:-1] * det
        mask = env_result.contact[1:, 1:-1, 1:-1]
    total = float((density * mask).sum()) * grid.dx ** d * grid.dt
    return SubdiffMeasure(value=total / grid.box_volume, slope_step=0.0,
                          slope_count=0, lip_bound=0.0, method="contact-MA")


def envelope_regularity(env_result: EnvelopeResult) -> dict:
    """Diagnostics on the contact set: max |backward time difference| and max
    |second difference| of Gamma, the discrete echo of its C^{1,1}/Lipschitz
    regularity. Finite and stable under refinement for solver outputs."""
    gamma = env_result.gamma
    grid = gamma.grid
    G = gamma.values
    d = grid.dimension
    dt_all = np.abs(G[1:] - G[:-1]) / grid.dt
    mask_t = env_result.contact[1:]
    max_dt = float(np.max(dt_all[mask_t], initial=0.0))
    inv_dx2 = 1.0 / (grid.dx * grid.dx)
    interior = (slice(None),) + tuple(slice(1, -1) for _ in range(d))
    max_sec = 0.0
    for a in range(d):
        sl_m = [slice(None)] + [slice(1, -1)] * d
        sl_p = [slice(None)] + [slice(1, -1)] * d
        sl_m[1 + a] = slice(0, -2)
        sl_p[1 + a] = slice(2, None)
        sec = np.abs(G[tuple(sl_m)] - 2.0 * G[interior] + G[tuple(sl_p)]) * inv_dx2
        m = env_result.contact[interior]
        max_sec = max(max_sec, float(np.max(sec[m], initial=0.0)))
    return {"max_time_slope": max_dt, "max_second_difference": max_sec}
