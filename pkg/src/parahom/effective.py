"""Effective operator extraction, homogenized solves and corrector decay.

Fbar(M) is the unique right-hand side at which the expectations of mu and
mu* both vanish in the large-cube limit; at finite level n it is estimated
by bisecting ell on the sign of E_n(ell) - E*_n(ell) with paired seeds
(E_n is nonincreasing in ell, E*_n nondecreasing, and both vanish at the
crossing). The homogenized equation u_t + Fbar(D^2 u) = 0 is solved with
the same explicit monotone scheme, the table interpolated piecewise
linearly; approximate correctors are zero-boundary solves with right-hand
side Fbar(M), whose rescaled sup-norms 9^-n ||w^n|| must decay.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from . import rng
from .environment import Environment, EnvironmentSpec
from .lattice import CubeIndex, Field, GridSpec, grid_for_cube, parabolic_boundary_mask
from .mu import _mdiag, mc_moments
from .solver import MAX_STORED_ENTRIES, SolveRequest, SolverError, solve_reduced


class BracketError(RuntimeError):
    """Both expectations stayed positive across the bracket: the level or the
    sample count is too small to see the crossing."""


@dataclass(frozen=True)
class EffectiveEstimate:
    M: tuple[float, ...]
    level: int
    ell_bar: float
    ell_lo: float
    ell_hi: float
    E_at: float
    E_ci_at: float
    E_star_at: float
    E_star_ci_at: float
    n_samples: int
    tol: float
    converged: bool
    evaluations: int


@dataclass
class FbarTable:
    """Effective operator sampled on a Hessian grid (scalar grid for d=1,
    product-of-diagonals grid for d=2)."""

    dimension: int
    ms: tuple
    values: np.ndarray
    cis: np.ndarray
    repaired: bool
    level: int
    bias_gap: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dimension == 1:
            self.ms = (np.asarray(self.ms[0] if isinstance(self.ms, tuple) else self.ms,
                                  dtype=float),)
        else:
            self.ms = tuple(np.asarray(a, dtype=float) for a in self.ms)

    @property
    def slope_max(self) -> float:
        worst = 0.0
        for a, axis in enumerate(self.ms):
            d = np.diff(self.values, axis=a)
            dm = np.diff(axis)
            shape = [1] * self.values.ndim
            shape[a] = len(dm)
            worst = max(worst, float(np.max(np.abs(d / dm.reshape(shape)), initial=0.0)))
        return worst

    def __call__(self, *hessian_diag):
        """Piecewise-linear evaluation with linear tails (slope -lam is not
        known here; tails continue the end slopes, which the ellipticity
        check keeps inside [-Lambda, -lam])."""
        if self.dimension == 1:
            return _interp_with_tails(np.asarray(hessian_diag[0], dtype=float),
                                      self.ms[0], self.values)
        return _bilinear_with_tails(np.asarray(hessian_diag[0], dtype=float),
                                    np.asarray(hessian_diag[1], dtype=float),
                                    self.ms[0], self.ms[1], self.values)

    def ellipticity_ok(self, lam: float, Lam: float, tol: float) -> bool:
        for a, axis in enumerate(self.ms):
            d = np.diff(self.values, axis=a)
            dm = np.diff(axis).reshape([len(axis) - 1 if i == a else 1
                                        for i in range(self.values.ndim)])
            if np.any(d > 1e-12) or np.any(-d > Lam * dm + 2 * tol):
                return False
        return True


@dataclass(frozen=True)
class CorrectorRun:
    M: tuple[float, ...]
    levels: tuple[int, ...]
    mean_norms: tuple[float, ...]
    max_norms: tuple[float, ...]
    rhs: float
    n_samples: int


def _interp_with_tails(x, ms, vs):
    y = np.interp(x, ms, vs)
    if len(ms) > 1:
        slo = (vs[1] - vs[0]) / (ms[1] - ms[0])
        shi = (vs[-1] - vs[-2]) / (ms[-1] - ms[-2])
        y = np.where(x < ms[0], vs[0] + slo * (x - ms[0]), y)
        y = np.where(x > ms[-1], vs[-1] + shi * (x - ms[-1]), y)
    return y


def _bilinear_with_tails(x, y, mx, my, vals):
    xi = np.clip(np.searchsorted(mx, x) - 1, 0, len(mx) - 2)
    yi = np.clip(np.searchsorted(my, y) - 1, 0, len(my) - 2)
    tx = (x - mx[xi]) / (mx[xi + 1] - mx[xi])
    ty = (y - my[yi]) / (my[yi + 1] - my[yi])
    v00 = vals[xi, yi]
    v10 = vals[xi + 1, yi]
    v01 = vals[xi, yi + 1]
    v11 = vals[xi + 1, yi + 1]
    return (1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10 \
        + (1 - tx) * ty * v01 + tx * ty * v11


def pava_decreasing(y: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators projection onto nonincreasing sequences."""
    vals = list(-np.asarray(y, dtype=float))
    wts = [1.0] * len(vals)
    out_v, out_w = [], []
    for v, w in zip(vals, wts):
        out_v.append(v)
        out_w.append(w)
        while len(out_v) > 1 and out_v[-2] > out_v[-1]:
            v2, w2 = out_v.pop(), out_w.pop()
            v1, w1 = out_v.pop(), out_w.pop()
            out_v.append((v1 * w1 + v2 * w2) / (w1 + w2))
            out_w.append(w1 + w2)
    rep = np.concatenate([np.full(int(w), v) for v, w in zip(out_v, out_w)])
    return -rep


# --------------------------------------------------------------- extraction


def operator_law_range(spec: EnvironmentSpec, Mdiag) -> tuple[float, float]:
    """Global value range of F(M, ., .) over the coefficient law; the
    effective operator lies inside it (constant-coefficient sandwich)."""
    ctr = np.asarray(spec.controls, dtype=float)
    vals = -(ctr * np.asarray(Mdiag)).sum(axis=1)
    lo, hi = spec.offset_range
    if spec.family == "hjb-min":
        return float(vals.min() + lo), float(vals.min() + hi)
    return float(vals.min() + lo), float(vals.max() + hi)


def estimate_fbar(spec: EnvironmentSpec, M, level: int, n_samples: int, tol: float,
                  bracket: Optional[tuple[float, float]] = None, refinement: int = 9,
                  n_jobs: int = 1, max_iter: int = 200,
                  coarse_bracket: bool = True) -> EffectiveEstimate:
    """Bisection of ell on the sign of E_n(ell) - E*_n(ell), paired seeds.

    Terminates when the bracket is narrower than tol; `converged` records the
    spec acceptance rule (both expectations at the midpoint below
    max(tol, 2 CI)), which a fixed level can genuinely fail to meet because
    the expectations keep a finite-level bias. Deterministic: all
    evaluations reuse the same spawned seed list.

    The default bracket is the operator's law range plus margin; with
    coarse_bracket the crossing is first located one level down and the fine
    bisection restarted on a narrow window around it (falling back to the
    full bracket if the window misses).
    """
    d = spec.dimension
    Mdiag = _mdiag(M, d)
    if bracket is None:
        flo, fhi = operator_law_range(spec, Mdiag)
        # margin sized so the supersolution floor c eta^(d+1) clears tol at
        # the bracket ends
        from .mu import lower_bound_constant
        margin = max(0.25, (4.0 * tol / lower_bound_constant(d, spec.Lam))
                     ** (1.0 / (d + 1)))
        bracket = (flo - margin, fhi + margin)
        if coarse_bracket and level >= 1:
            coarse = estimate_fbar(spec, Mdiag, level - 1, n_samples, tol,
                                   refinement=refinement, n_jobs=n_jobs,
                                   max_iter=max_iter, coarse_bracket=level > 2)
            pad = max(0.15, 20 * tol)
            narrow = (max(bracket[0], coarse.ell_bar - pad),
                      min(bracket[1], coarse.ell_bar + pad))
            try:
                est = _bisect_fbar(spec, Mdiag, level, n_samples, tol, narrow,
                                   refinement, n_jobs, max_iter)
                pinned = min(est.ell_bar - narrow[0],
                             narrow[1] - est.ell_bar) < 2 * tol
                if not pinned:
                    return est
            except BracketError:
                pass
    lo, hi = float(bracket[0]), float(bracket[1])
    if not lo < hi:
        raise ValueError("bracket must be ordered")
    return _bisect_fbar(spec, Mdiag, level, n_samples, tol, (lo, hi),
                        refinement, n_jobs, max_iter)


def _bisect_fbar(spec, Mdiag, level, n_samples, tol, bracket, refinement,
                 n_jobs, max_iter) -> EffectiveEstimate:
    lo, hi = bracket
    evals = 0

    def moments(ell):
        nonlocal evals
        evals += 1
        return mc_moments(spec, level, ell, Mdiag, n_samples, refinement,
                          base_seed=spec.seed, n_jobs=n_jobs)

    s_lo = moments(lo)
    s_hi = moments(hi)
    if s_lo.E <= tol or s_hi.E_star <= tol:
        raise BracketError(
            f"bracket too narrow: E({lo})={s_lo.E}, E*({hi})={s_hi.E_star}")
    it = 0
    while hi - lo > tol and it < max_iter:
        mid = 0.5 * (lo + hi)
        s_mid = moments(mid)
        if s_mid.E - s_mid.E_star > 0:
            lo = mid
        else:
            hi = mid
        it += 1
    ell_bar = 0.5 * (lo + hi)
    s_bar = moments(ell_bar)
    cap = max(tol, 2 * s_bar.E_ci, 2 * s_bar.E_star_ci)
    converged = s_bar.E <= cap and s_bar.E_star <= cap
    return EffectiveEstimate(M=Mdiag, level=level, ell_bar=ell_bar, ell_lo=lo,
                             ell_hi=hi, E_at=s_bar.E, E_ci_at=s_bar.E_ci,
                             E_star_at=s_bar.E_star, E_star_ci_at=s_bar.E_star_ci,
                             n_samples=n_samples, tol=tol, converged=converged,
                             evaluations=evals)


def build_fbar_table(spec: EnvironmentSpec, m_grid: Sequence, level: int,
                     n_samples: int, tol: float, refinement: int = 9,
                     n_jobs: int = 1, bias_gap: bool = False) -> FbarTable:
    """Fbar on a sorted Hessian grid with monotone (nonincreasing) repair.

    The repaired flag records whether Monte Carlo noise violated the
    ellipticity ordering anywhere. With bias_gap, each point is re-estimated
    one level down and the gap recorded as a finite-level bias proxy.
    """
    d = spec.dimension
    if d == 1:
        ms = np.asarray(list(m_grid), dtype=float)
        if np.any(np.diff(ms) <= 0):
            raise ValueError("m grid must be strictly increasing")
        ests = [estimate_fbar(spec, m, level, n_samples, tol, refinement=refinement,
                              n_jobs=n_jobs) for m in ms]
        vals = np.array([e.ell_bar for e in ests])
        cis = np.array([max(e.E_ci_at, e.E_star_ci_at) for e in ests])
        repaired_vals = pava_decreasing(vals)
        repaired = bool(np.max(np.abs(repaired_vals - vals)) > 1e-15)
        gap = None
        if bias_gap:
            lower = [estimate_fbar(spec, m, level - 1, n_samples, tol,
                                   refinement=refinement, n_jobs=n_jobs) for m in ms]
            gap = np.array([e.ell_bar - lo.ell_bar for e, lo in zip(ests, lower)])
        return FbarTable(dimension=1, ms=(ms,), values=repaired_vals, cis=cis,
                         repaired=repaired, level=level, bias_gap=gap)

    ax1 = np.asarray(list(m_grid[0]), dtype=float)
    ax2 = np.asarray(list(m_grid[1]), dtype=float)
    vals = np.empty((len(ax1), len(ax2)))
    cis = np.empty_like(vals)
    for i, m1 in enumerate(ax1):
        for j, m2 in enumerate(ax2):
            e = estimate_fbar(spec, (m1, m2), level, n_samples, tol,
                              refinement=refinement, n_jobs=n_jobs)
            vals[i, j] = e.ell_bar
            cis[i, j] = max(e.E_ci_at, e.E_star_ci_at)
    original = vals.copy()
    for _ in range(50):  # alternate per-axis PAVA until fixed point
        prev = vals.copy()
        vals = np.apply_along_axis(pava_decreasing, 0, vals)
        vals = np.apply_along_axis(pava_decreasing, 1, vals)
        if np.max(np.abs(vals - prev)) < 1e-14:
            break
    repaired = bool(np.max(np.abs(vals - original)) > 1e-15)
    return FbarTable(dimension=2, ms=(ax1, ax2), values=vals, cis=cis,
                     repaired=repaired, level=level)


# ---------------------------------------------------------------- homog PDE


def _homog_sweep(table: FbarTable, grid: GridSpec, boundary, lam_max: float,
                 keep: Optional[Sequence[int]] = None):
    """Forward Euler for u_t + Fbar(D_h^2 u) = 0; returns either the full
    stack of slices or only those listed in `keep` (sorted indices)."""
    d = grid.dimension
    smax = max(lam_max, table.slope_max)
    if grid.dt > grid.dx ** 2 / (2.0 * d * smax) * (1 + 1e-12):
        raise SolverError("CFL violated for the effective-table slopes")
    from .solver import _boundary_fn, _lateral_indices
    g = _boundary_fn(boundary)
    coords = grid.node_coords()
    u = np.asarray(g(*coords, grid.t0), dtype=float).reshape(grid.shape).copy()
    lat = _lateral_indices(grid.shape)
    lat_coords = [coords[a][lat] for a in range(d)]
    times = grid.times()
    inv_dx2 = 1.0 / (grid.dx * grid.dx)
    interior = tuple(slice(1, -1) for _ in range(d))

    keep_set = None if keep is None else set(int(k) for k in keep)
    if keep is None:
        total = (grid.steps + 1) * int(np.prod(grid.shape))
        if total > MAX_STORED_ENTRIES:
            raise SolverError("field too large; pass keep= to subsample slices")
        out = np.empty((grid.steps + 1,) + grid.shape)
        out[0] = u
    else:
        out = np.empty((len(keep_set),) + grid.shape)
        kept = sorted(keep_set)
        pos = {k: i for i, k in enumerate(kept)}
        if 0 in keep_set:
            out[pos[0]] = u

    for k in range(grid.steps):
        d2 = []
        for a in range(d):
            sl_m = [slice(1, -1)] * d
            sl_p = [slice(1, -1)] * d
            sl_m[a] = slice(0, -2)
            sl_p[a] = slice(2, None)
            d2.append((u[tuple(sl_m)] - 2.0 * u[interior] + u[tuple(sl_p)]) * inv_dx2)
        Fv = table(*d2)
        un = u.copy()
        un[interior] = u[interior] - grid.dt * Fv
        un[lat] = np.asarray(g(*lat_coords, times[k + 1]), dtype=float).reshape(un[lat].shape)
        u = un
        if not np.all(np.isfinite(u)):
            raise SolverError("homogenized solve blew up")
        if keep is None:
            out[k + 1] = u
        elif (k + 1) in keep_set:
            out[pos[k + 1]] = u
    if keep is None:
        return out
    return sorted(keep_set), out


def solve_homogenized(table: FbarTable, grid: GridSpec, boundary=None,
                      lam_max: Optional[float] = None) -> Field:
    """Homogenized Dirichlet solve on `grid` with Fbar from the table."""
    if table.dimension != grid.dimension:
        raise ValueError("table/grid dimension mismatch")
    lm = table.slope_max if lam_max is None else lam_max
    vals = _homog_sweep(table, grid, boundary, lm)
    return Field(grid, vals, parabolic_boundary_mask(grid))


def solve_homogenized_sampled(table: FbarTable, grid: GridSpec, boundary,
                              keep: Sequence[int], lam_max: Optional[float] = None):
    lm = table.slope_max if lam_max is None else lam_max
    return _homog_sweep(table, grid, boundary, lm, keep=keep)


# --------------------------------------------------------------- correctors


def _corrector_norm(spec: EnvironmentSpec, seed: int, level: int, Mdiag, ell: float,
                    refinement: int) -> float:
    env = Environment(replace(spec, seed=int(seed)))
    grid = grid_for_cube(CubeIndex(level, (0,) * spec.dimension, 0), refinement, spec.Lam)
    red = solve_reduced(SolveRequest(env=env, M=np.array(Mdiag), ell=ell, grid=grid))
    return 9.0 ** (-level) * red.sup_norm


def corrector_decay(spec: EnvironmentSpec, M, levels: Sequence[int], n_samples: int,
                    ell_bar: float, refinement: int = 9, n_jobs: int = 1,
                    rhs_offset: float = 0.0) -> CorrectorRun:
    """Rescaled corrector sup-norms 9^-n ||w^n|| across levels and seeds.

    w^n solves w_t + F(M + D^2 w) = Fbar(M) + rhs_offset with zero data on
    the level-n cube; a nonzero offset is the negative control (norms then
    plateau at ~|offset| instead of decaying).
    """
    d = spec.dimension
    Mdiag = _mdiag(M, d)
    ell = ell_bar + rhs_offset
    seeds = rng.spawn_seeds(spec.seed, n_samples)
    means, maxes = [], []
    for lvl in levels:
        if n_jobs == 1:
            norms = [_corrector_norm(spec, s, lvl, Mdiag, ell, refinement) for s in seeds]
        else:
            norms = Parallel(n_jobs=n_jobs)(
                delayed(_corrector_norm)(spec, s, lvl, Mdiag, ell, refinement)
                for s in seeds)
        means.append(float(np.mean(norms)))
        maxes.append(float(np.max(norms)))
    return CorrectorRun(M=Mdiag, levels=tuple(int(v) for v in levels),
                        mean_norms=tuple(means), max_norms=tuple(maxes),
                        rhs=ell, n_samples=n_samples)
