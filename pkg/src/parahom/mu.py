"""Estimation of the subadditive quantities mu and mu*, their Monte Carlo
moments, and the per-sample inequality checks.

mu(G_n, omega, ell, M) is defined through a supremum over supersolutions.
The estimator here is the canonical one: the exact solution with zero
Dirichlet data, whose normalized fiber measure is a lower bound for mu,
combined with the explicit quadratic supersolution floor
(eta/4) * (eta/(2 d Lambda))^d,  eta = inf_cube (F(M,.) - ell)_+,
which is also always admissible. The floor vanishes in sign-indefinite
environments, so moment statistics are driven by the solution estimator;
it guarantees the universal lower bound in constant-sign environments, where
the zero-boundary solution alone provably undershoots it. An optional
boundary-perturbation probe re-estimates with random Lipschitz boundary
data and keeps the max.

mu*(G_n, omega, ell, M) = mu(G_n, omega*, -ell, -M) via the involution,
computed on the same draws so starred/plain statistics are paired.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from . import rng
from .envelope import fiber_measure_from_extremes, subdiff_measure_fiber
from .environment import Environment, EnvironmentSpec, F_range_on_cube
from .lattice import CubeIndex, Field, children, grid_for_cube, restrict
from .solver import ReducedSolution, SolveRequest, solve_dirichlet, solve_reduced

Z95 = 1.959963984540054


def hypercone_constant(d: int) -> float:
    """Volume constant of the hypercone {(p, h)} with base radius a/sqrt(d)
    and height a in R^(d+1): c_d = omega_d d^(-d/2) / (d+1)."""
    omega_d = math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)
    return omega_d * d ** (-d / 2.0) / (d + 1.0)


def ptf_constant(d: int) -> float:
    """The ABP-type constant: (1/c_d)^(1/(d+1))."""
    return hypercone_constant(d) ** (-1.0 / (d + 1.0))


def lower_bound_constant(d: int, Lam: float) -> float:
    """Coefficient of eta^(d+1) in the quadratic-supersolution floor."""
    return 0.25 * (2.0 * d * Lam) ** (-d)


def upper_bound_constant(d: int, lam: float) -> float:
    """Coefficient of eta^(d+1) in the contact-set upper bound, from the
    geometric-arithmetic mean inequality: lambda^-d (d+1)^-(d+1)."""
    return lam ** (-d) * (d + 1.0) ** (-(d + 1.0))


@dataclass(frozen=True)
class MuSample:
    cube: CubeIndex
    ell: float
    M: tuple[float, ...]
    seed: int
    value: float
    starred: bool
    method: str
    refinement: int
    solution_measure: float
    floor: float

    def as_row(self) -> dict:
        full = np.diag(self.M)  # diagonal shift, serialized row-major
        return {
            "level": self.cube.level,
            "anchor": " ".join(str(i) for i in (*self.cube.spatial, self.cube.temporal)),
            "ell": self.ell,
            "M": " ".join(repr(float(v)) for v in full.ravel()),
            "seed": self.seed,
            "starred": int(self.starred),
            "method": self.method,
            "refinement": self.refinement,
            "value": self.value,
        }


@dataclass(frozen=True)
class MuStats:
    level: int
    ell: float
    M: tuple[float, ...]
    n: int
    E: float
    E_ci: float
    J: float
    J_ci: float
    E_star: float
    E_star_ci: float
    J_star: float
    J_star_ci: float
    values: tuple[float, ...]
    values_star: tuple[float, ...]


def _mdiag(M, d: int) -> tuple[float, ...]:
    a = np.atleast_1d(np.asarray(M, dtype=float))
    if a.ndim == 2:
        a = np.diag(a)
    if a.shape != (d,):
        raise ValueError("M must give d diagonal entries")
    return tuple(float(v) for v in a)


def _floor_value(env: Environment, cube: CubeIndex, ell: float, Mdiag) -> float:
    # F_range_on_cube evaluates the involuted operator when env is starred
    d = env.spec.dimension
    fmin, _ = F_range_on_cube(env, cube, list(Mdiag))
    eta = max(0.0, fmin - ell)
    return lower_bound_constant(d, env.spec.Lam) * eta ** (d + 1)


def estimate_mu(env: Environment, cube: CubeIndex, ell: float, M, refinement: int,
                slope_step: Optional[float] = None, probe_boundary: int = 0,
                return_solution: bool = False):
    """One realization of the normalized measure on a cube.

    Solves u_t + F(M + D^2 u) = ell with zero Dirichlet data, takes the fiber
    measure of the solution (the streaming fast path applies: zero data is
    time-constant), and floors it by the quadratic-supersolution value.
    """
    d = env.spec.dimension
    Mdiag = _mdiag(M, d)
    grid = grid_for_cube(cube, refinement, env.spec.Lam)
    red = solve_reduced(SolveRequest(env=env, M=np.array(Mdiag), ell=ell, grid=grid))
    meas = fiber_measure_from_extremes(red.u0, red.run_min, grid, slope_step)
    sol_val = meas.value

    for j in range(probe_boundary):
        g = _probe_boundary_fn(env.spec.seed, j, d)
        red_j = solve_reduced(SolveRequest(env=env, M=np.array(Mdiag), ell=ell,
                                           grid=grid, boundary=g))
        m_j = fiber_measure_from_extremes(red_j.u0, red_j.run_min, grid, slope_step)
        sol_val = max(sol_val, m_j.value)

    floor = _floor_value(env, cube, ell, Mdiag)
    value = max(sol_val, floor)
    method = "fiber" if sol_val >= floor else "fiber+floor"
    sample = MuSample(cube=cube, ell=ell, M=Mdiag, seed=env.spec.seed, value=value,
                      starred=env.starred, method=method, refinement=refinement,
                      solution_measure=sol_val, floor=floor)
    if return_solution:
        return sample, red
    return sample


def estimate_mu_star(env: Environment, cube: CubeIndex, ell: float, M, refinement: int,
                     slope_step: Optional[float] = None, probe_boundary: int = 0,
                     return_solution: bool = False):
    """mu*(cube, omega, ell, M) = mu(cube, omega*, -ell, -M), same draws."""
    d = env.spec.dimension
    Mdiag = _mdiag(M, d)
    res = estimate_mu(env.involute(), cube, -ell, [-m for m in Mdiag], refinement,
                      slope_step, probe_boundary, return_solution)
    sample, red = res if return_solution else (res, None)
    sample = replace(sample, ell=ell, M=Mdiag, starred=not env.starred)
    return (sample, red) if return_solution else sample


def _probe_boundary_fn(seed: int, j: int, d: int, amplitude: float = 1.0):
    """Random Lipschitz boundary data: piecewise-linear interpolation of
    hashed nodal values on the integer lattice, constant in time."""
    base = rng.combine(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), rng.TAG_BOUNDARY)
    base = rng.combine(base, j)

    def g(*args):
        xs = [np.asarray(a, dtype=float) for a in args[:-1]]
        out = np.zeros(np.broadcast(*xs).shape) if len(xs) > 1 else np.zeros(xs[0].shape)
        for a, x in enumerate(xs):
            lo = np.floor(x).astype(np.int64)
            frac = x - lo
            v0 = rng.uniform(rng.combine(rng.combine(base, a), lo), -amplitude, amplitude)
            v1 = rng.uniform(rng.combine(rng.combine(base, a), lo + 1), -amplitude, amplitude)
            out = out + (1.0 - frac) * v0 + frac * v1
        return out

    return g


# ------------------------------------------------------------------ moments


def _pair_for_seed(spec: EnvironmentSpec, seed: int, cube: CubeIndex, ell: float,
                   Mdiag, refinement: int, slope_step) -> tuple[float, float]:
    env = Environment(replace(spec, seed=int(seed)))
    s = estimate_mu(env, cube, ell, list(Mdiag), refinement, slope_step)
    t = estimate_mu_star(env, cube, ell, list(Mdiag), refinement, slope_step)
    return s.value, t.value


def mc_moments(spec: EnvironmentSpec, level: int, ell: float, M, n_samples: int,
               refinement: int, slope_step: Optional[float] = None,
               base_seed: Optional[int] = None, n_jobs: int = 1,
               anchor: Optional[tuple] = None) -> MuStats:
    """Paired plain/starred Monte Carlo moments over n independent seeds.

    Seeds are spawned deterministically from the spec seed (or base_seed), so
    reruns are byte-identical and starred samples share draws with plain ones.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    d = spec.dimension
    Mdiag = _mdiag(M, d)
    cube = CubeIndex(level, (0,) * d, 0) if anchor is None else CubeIndex(level, *anchor)
    seeds = rng.spawn_seeds(spec.seed if base_seed is None else base_seed, n_samples)
    if n_jobs == 1:
        pairs = [_pair_for_seed(spec, s, cube, ell, Mdiag, refinement, slope_step)
                 for s in seeds]
    else:
        pairs = Parallel(n_jobs=n_jobs)(
            delayed(_pair_for_seed)(spec, s, cube, ell, Mdiag, refinement, slope_step)
            for s in seeds)
    vals = [p[0] for p in pairs]
    vals_star = [p[1] for p in pairs]
    return stats_from_pairs(level, ell, Mdiag, vals, vals_star)


def stats_from_pairs(level: int, ell: float, Mdiag, values, values_star) -> MuStats:
    vals = np.asarray(values, dtype=float)
    vals_star = np.asarray(values_star, dtype=float)

    def _stats(v):
        n = len(v)
        mean = float(v.mean())
        ci = Z95 * float(v.std(ddof=1)) / math.sqrt(n)
        sq = v * v
        j = float(sq.mean())
        jci = Z95 * float(sq.std(ddof=1)) / math.sqrt(n)
        return mean, ci, j, jci

    E, E_ci, J, J_ci = _stats(vals)
    Es, Es_ci, Js, Js_ci = _stats(vals_star)
    return MuStats(level=level, ell=ell, M=tuple(Mdiag), n=len(vals),
                   E=E, E_ci=E_ci, J=J, J_ci=J_ci,
                   E_star=Es, E_star_ci=Es_ci, J_star=Js, J_star_ci=Js_ci,
                   values=tuple(float(v) for v in vals),
                   values_star=tuple(float(v) for v in vals_star))


# ------------------------------------------------------------------- checks


def check_abp(solution, sample: MuSample, zero_tol: float = 1e-12) -> dict:
    """Ratio (inf_boundary u - inf_cube u) / (3^(2n) value^(1/(d+1))) against
    the hypercone constant; 0/0 counts as 0, positive/0 as +inf."""
    if isinstance(solution, ReducedSolution):
        inf_bdry = min(float(solution.u0.min()), solution.boundary_min)
        inf_all = solution.inf_all
    else:
        field = solution.field if hasattr(solution, "field") else solution
        inf_bdry = float(field.values[field.boundary].min())
        inf_all = float(field.values.min())
    d = len(sample.M)
    numer = inf_bdry - inf_all
    scale = 9.0 ** sample.cube.level * sample.value ** (1.0 / (d + 1))
    if numer <= zero_tol:
        ratio = 0.0
    elif scale == 0.0:
        ratio = math.inf
    else:
        ratio = numer / scale
    bound = ptf_constant(d)
    return {"ratio": ratio, "bound": bound, "ok": ratio <= bound * 1.1,
            "numerator": numer, "value": sample.value}


def check_bounds(env: Environment, cube: CubeIndex, ell: float, M,
                 sample: MuSample, slack: float = 0.10) -> dict:
    """Universal bounds: lower from the quadratic supersolution, upper from
    the contact-set/AM-GM estimate, both with configurable slack.

    (env, ell, M) describe the quantity in the sample's own coordinates;
    starred samples are rewritten through the involution before probing the
    operator range.
    """
    d = env.spec.dimension
    Mdiag = _mdiag(M, d)
    if sample.starred:
        probe_env, probe_ell, probe_M = env.involute(), -ell, [-m for m in Mdiag]
    else:
        probe_env, probe_ell, probe_M = env, ell, list(Mdiag)
    fmin, fmax = F_range_on_cube(probe_env, cube, probe_M)
    eta_lo = max(0.0, fmin - probe_ell)
    eta_hi = max(0.0, fmax - probe_ell)
    lower = lower_bound_constant(d, env.spec.Lam) * eta_lo ** (d + 1)
    upper = upper_bound_constant(d, env.spec.lam) * eta_hi ** (d + 1)
    ok = (sample.value >= lower * (1 - slack) - 1e-15) and \
         (sample.value <= upper * (1 + slack) + 1e-15)
    return {"lower": lower, "upper": upper, "value": sample.value, "ok": ok,
            "eta_lower": eta_lo, "eta_upper": eta_hi}


def check_subadditivity(env: Environment, cube: CubeIndex, ell: float, M,
                        refinement: int, slack: float = 0.05,
                        slope_step: Optional[float] = None,
                        ambient: str = "self") -> dict:
    """Parent measure against the average of the 3^(d+2) child measures of
    the restricted solution. ambient="self" recomputes each child's own
    parabolic boundary (the decomposition-proof reading); ambient="cube"
    keeps minima over the parent cube and windows attainment."""
    d = env.spec.dimension
    Mdiag = _mdiag(M, d)
    grid = grid_for_cube(cube, refinement, env.spec.Lam)
    sol = solve_dirichlet(SolveRequest(env=env, M=np.array(Mdiag), ell=ell, grid=grid))
    parent = subdiff_measure_fiber(sol.field, slope_step)
    kids = children(cube)
    child_vals = []
    for kid in kids:
        if ambient == "self":
            sub = restrict(sol.field, kid)
            child_vals.append(subdiff_measure_fiber(sub, slope_step).value)
        elif ambient == "cube":
            win = _window_mask(sol.field, kid)
            child_vals.append(subdiff_measure_fiber(sol.field, slope_step, window=win).value
                              * grid.box_volume / kid.volume)
        else:
            raise ValueError("ambient must be 'self' or 'cube'")
    child_mean = float(np.mean(child_vals))
    ok = parent.value <= child_mean * (1 + slack) + 1e-15
    return {"parent": parent.value, "child_mean": child_mean, "ok": ok,
            "children": child_vals, "ambient": ambient}


def _window_mask(field: Field, cube: CubeIndex) -> np.ndarray:
    g = field.grid
    lo, hi, t1, t2 = cube.bounds()
    mask = np.ones((g.steps + 1,) + g.shape, dtype=bool)
    times = g.times()
    tin = (times > t1 + 1e-12) & (times <= t2 + 1e-12)
    mask &= tin[(slice(None),) + (None,) * g.dimension]
    for a in range(g.dimension):
        ax = g.axis(a)
        xin = (ax >= lo[a] - 1e-12) & (ax < hi[a] - 1e-12)
        shape = [1] * (g.dimension + 1)
        shape[1 + a] = len(ax)
        mask &= xin.reshape(shape)
    return mask


def check_lipschitz_ell(spec: EnvironmentSpec, level: int, M, ells: Sequence[float],
                        n_samples: int, refinement: int, n_jobs: int = 1) -> dict:
    """Paired-seed means across an ell grid: nonincreasing within CI, with the
    fitted Lipschitz constant max |dE/d ell| reported."""
    ells = list(ells)
    stats = [mc_moments(spec, level, ell, M, n_samples, refinement,
                        base_seed=spec.seed, n_jobs=n_jobs) for ell in ells]
    Es = [s.E for s in stats]
    cis = [s.E_ci for s in stats]
    mono_ok = all(Es[i + 1] <= Es[i] + cis[i] + cis[i + 1] + 1e-12
                  for i in range(len(ells) - 1))
    slopes = [abs(Es[i + 1] - Es[i]) / abs(ells[i + 1] - ells[i])
              for i in range(len(ells) - 1)]
    return {"ells": ells, "E": Es, "E_ci": cis, "monotone_ok": mono_ok,
            "lipschitz_C": max(slopes) if slopes else 0.0, "stats": stats}


def check_variance_decay(stats_m: MuStats, stats_mn: MuStats, d: int) -> dict:
    """J_{m+n} <= E_m^2 + 3^(d+1) 3^(-n(d+2)) J_m within combined CI, and the
    starred twin."""
    n = stats_mn.level - stats_m.level
    if n < 0:
        raise ValueError("stats_mn must be the deeper level")
    mix = 3.0 ** (d + 1) / 3.0 ** (n * (d + 2))

    def _one(Jmn, Jmn_ci, Em, Em_ci, Jm, Jm_ci):
        rhs = Em * Em + mix * Jm
        slack = Jmn_ci + 2.0 * abs(Em) * Em_ci + Em_ci * Em_ci + mix * Jm_ci
        return {"lhs": Jmn, "rhs": rhs, "slack": slack, "ok": Jmn <= rhs + slack + 1e-15}

    plain = _one(stats_mn.J, stats_mn.J_ci, stats_m.E, stats_m.E_ci,
                 stats_m.J, stats_m.J_ci)
    star = _one(stats_mn.J_star, stats_mn.J_star_ci, stats_m.E_star, stats_m.E_star_ci,
                stats_m.J_star, stats_m.J_star_ci)
    return {"mix_constant": mix, "plain": plain, "star": star,
            "ok": plain["ok"] and star["ok"]}
