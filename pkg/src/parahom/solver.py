"""Explicit monotone finite-difference solver for
u_t + F(M + D^2 u, x, t, omega) = ell with Dirichlet data on the parabolic
boundary.

The forward Euler update u^{k+1} = u^k + dt (ell - F_h(M + D_h^2 u^k, x, t_k))
with the 3-point second difference per axis is nondecreasing in every
neighbouring value whenever dt <= dx^2/(2 d Lambda), so solutions obey a
discrete comparison principle by construction. Coefficients are frozen per
unit time cell (half-open (j, j+1], so t_k on an integer face reads the
cell below it); smoothing > 0 falls back to a generic per-step path.

Two drivers share the sweep: `solve_dirichlet` materializes the full
space-time field, `solve_reduced` streams it and keeps only O(nodes)
reductions (initial slice, running min/max per node, boundary statistics),
which is what the measure estimators need on deep cubes.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import _kernels
from .environment import Environment, _diag_of
from .lattice import Field, GridSpec, cfl_dt, parabolic_boundary_mask

BoundaryData = Union[None, float, Callable]

# refuse to materialize fields beyond ~0.5 GB; use solve_reduced instead
MAX_STORED_ENTRIES = 1 << 26


class SolverError(RuntimeError):
    pass


class CFLViolation(SolverError):
    pass


class NumericalBlowup(SolverError):
    pass


@dataclass(frozen=True)
class SolveRequest:
    """One Dirichlet problem. `boundary` is a callable g(*x, t) broadcasting
    over coordinate arrays, a constant, or None for zero data."""

    env: Environment
    M: object
    ell: float
    grid: GridSpec
    boundary: BoundaryData = None


@dataclass
class Solution:
    field: Field
    residual: float
    steps: int
    wall_time: float


@dataclass
class ReducedSolution:
    """Streaming reductions of a solve: enough for the fiber measure, the
    ABP ratio and sup-norms, without storing the space-time field."""

    grid: GridSpec
    u0: np.ndarray
    run_min: np.ndarray
    run_max: np.ndarray
    boundary_min: float
    boundary_max: float
    lateral_constant: bool
    steps: int
    wall_time: float

    @property
    def sup_norm(self) -> float:
        return max(float(np.max(np.abs(self.run_min))), float(np.max(np.abs(self.run_max))))

    @property
    def inf_all(self) -> float:
        return float(self.run_min.min())


def _boundary_fn(boundary: BoundaryData):
    if callable(boundary):
        return boundary
    val = 0.0 if boundary is None else float(boundary)
    if not math.isfinite(val):
        raise SolverError("boundary data must be finite")

    def constant(*args):
        return np.full(np.broadcast(*args[:-1]).shape, val)

    return constant


def _lateral_indices(shape):
    if len(shape) == 1:
        return (np.array([0, shape[0] - 1], dtype=np.int64),)
    ny, nx = shape
    iy, ix = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    lat = (iy == 0) | (iy == ny - 1) | (ix == 0) | (ix == nx - 1)
    return iy[lat].astype(np.int64), ix[lat].astype(np.int64)


def _node_cells(grid: GridSpec, axis: int) -> np.ndarray:
    """Unit-cell index per node along an axis, in exact integer arithmetic.

    Node positions live on the dx/2 lattice (cube origins are half-integers):
    x = (J0 + 2i) dx/2, and the cell of x is floor(x + 1/2) =
    floor((J0 + 2i + r) / (2r)) with r = 1/dx.
    """
    r = round(1.0 / grid.dx)
    if abs(r * grid.dx - 1.0) > 1e-9:
        raise SolverError("solver grids need dx = 1/integer")
    J0 = round(2.0 * grid.origin[axis] / grid.dx)
    if abs(J0 * grid.dx / 2.0 - grid.origin[axis]) > 1e-9:
        raise SolverError("grid origin must sit on the dx/2 lattice")
    J = J0 + 2 * np.arange(grid.shape[axis], dtype=np.int64)
    return np.floor_divide(J + r, 2 * r)


def time_blocks(grid: GridSpec):
    """Yield (time_cell, k_start, n_steps) grouping update steps by the unit
    time cell containing the slab (t_k, t_{k+1}] they integrate over
    (cell(t) = ceil(t) - 1, exact integers). Using the slab's own cell keeps
    cube-aligned solves from reading coefficients below the cube's initial
    face on the first step."""
    spu = round(1.0 / grid.dt)
    if abs(spu * grid.dt - 1.0) > 1e-9:
        raise SolverError("solver grids need dt = 1/integer")
    T0 = round(grid.t0 / grid.dt)
    if abs(T0 * grid.dt - grid.t0) > 1e-9:
        raise SolverError("grid t0 must sit on the dt lattice")
    k = 0
    while k < grid.steps:
        cell = -((-(T0 + k + 1)) // spu) - 1
        k_end = min(grid.steps - 1, (cell + 1) * spu - T0 - 1)
        yield int(cell), k, k_end - k + 1
        k = k_end + 1


def _validate(req: SolveRequest):
    grid, env = req.grid, req.env
    if grid.dimension != env.spec.dimension:
        raise SolverError("grid/environment dimension mismatch")
    if not grid.cfl_ok(env.spec.Lam):
        raise CFLViolation(
            f"dt={grid.dt} exceeds CFL bound {cfl_dt(grid.dx, env.spec.Lam, grid.dimension)}")
    if any(n - 2 < 3 for n in grid.shape):
        raise SolverError("need at least 3 interior nodes per axis")
    if not math.isfinite(req.ell):
        raise SolverError("ell must be finite")


def _block_tables(env: Environment, grid: GridSpec, cell_maps, tcell: int):
    """Coefficient tables for one time cell, plus node->row index maps."""
    d = grid.dimension
    rows = []
    maps = []
    for a in range(d):
        cmin, cmax = int(cell_maps[a].min()), int(cell_maps[a].max())
        rows.append(np.arange(cmin, cmax + 1, dtype=np.int64))
        maps.append((cell_maps[a] - cmin).astype(np.int64))
    mesh = np.meshgrid(*rows, np.asarray([tcell], dtype=np.int64), indexing="ij")
    A, c = env.cell_tables(*mesh)
    A = A[..., 0, :, :, :] if d == 1 else A[:, :, 0, :, :, :]
    c = c[..., 0, :, :] if d == 1 else c[:, :, 0, :, :]
    return A, c, maps


def _segments(nsteps: int, k0: int, keep):
    """Split a block's steps at capture points: yields (offset, length)."""
    if not keep:
        yield 0, nsteps
        return
    stops = sorted(k - k0 for k in keep if k0 < k <= k0 + nsteps)
    prev = 0
    for s in stops:
        if s > prev:
            yield prev, s - prev
        prev = s
    if prev < nsteps:
        yield prev, nsteps - prev


def _sweep(req: SolveRequest, store: bool, keep=None, force_generic: bool = False):
    _validate(req)
    env, grid = req.env, req.grid
    d = grid.dimension
    Mdiag = _diag_of(req.M, d)
    g = _boundary_fn(req.boundary)
    coords = grid.node_coords()
    keep = set(int(k) for k in keep) if keep else None
    captured = {}
    t0 = time.perf_counter()

    u = np.asarray(g(*coords, grid.t0), dtype=float).reshape(grid.shape).copy()
    if not np.all(np.isfinite(u)):
        raise SolverError("boundary data must be finite")
    u0 = u.copy()
    mmin = u.copy()
    mmax = u.copy()
    lat = _lateral_indices(grid.shape)
    lat_coords = [coords[a][lat] for a in range(d)]
    lat0 = u[lat]
    bmin = float(u.min())
    bmax = float(u.max())
    lateral_constant = True

    out = None
    if store:
        total = (grid.steps + 1) * int(np.prod(grid.shape))
        if total > MAX_STORED_ENTRIES:
            raise SolverError(
                f"field of {total} entries exceeds the storage cap; use solve_reduced")
        out = np.empty((grid.steps + 1,) + grid.shape)
        out[0] = u
    dummy = np.zeros((1,) + grid.shape)
    if keep and 0 in keep:
        captured[0] = u.copy()

    cell_maps = [_node_cells(grid, a) for a in range(d)]
    inv_dx2 = 1.0 / (grid.dx * grid.dx)
    sgn = -1.0 if env.starred else 1.0
    theta = env.spec.smoothing
    times = grid.times()
    blocks = list(time_blocks(grid))

    maps = None
    if theta == 0.0 and not force_generic:
        # hash every cell of the space-time box in one vectorized pass
        rows = [np.arange(int(cm.min()), int(cm.max()) + 1) for cm in cell_maps]
        maps = [(cm - cm.min()).astype(np.int64) for cm in cell_maps]
        trange = np.array([b[0] for b in blocks], dtype=np.int64)
        shapes = []
        for a, r in enumerate(rows):
            sh = [1] * (d + 1)
            sh[1 + a] = len(r)
            shapes.append(r.reshape(sh))
        A_all, c_all = env.cell_tables(*shapes, trange.reshape((-1,) + (1,) * d))
        if env.starred:
            A_all = -A_all
        if d == 1:
            A_blocks = np.ascontiguousarray(A_all[..., 0])
        else:
            A_blocks = np.ascontiguousarray(A_all)
        c_blocks = np.ascontiguousarray(c_all)

    constant_data = req.boundary is None or not callable(req.boundary)
    for b_i, (tcell, k0, nsteps) in enumerate(blocks):
        if constant_data:
            bvals = np.broadcast_to(lat0, (nsteps,) + lat0.shape)
        else:
            tnew = times[k0 + 1: k0 + 1 + nsteps]
            bvals = np.empty((nsteps, lat0.shape[0]))
            for s in range(nsteps):
                bvals[s] = np.asarray(g(*lat_coords, tnew[s]),
                                      dtype=float).reshape(lat0.shape)
            if lateral_constant and np.max(np.abs(bvals - lat0), initial=0.0) > 0.0:
                lateral_constant = False
            bmin = min(bmin, float(bvals.min()))
            bmax = max(bmax, float(bvals.max()))

        if theta == 0.0 and not force_generic:
            A1 = A_blocks[b_i]
            cc = c_blocks[b_i]
            for off, ns in _segments(nsteps, k0, keep):
                target = out[k0 + 1 + off: k0 + 1 + off + ns] if store else dummy
                bseg = bvals[off: off + ns]
                if d == 1:
                    _kernels.sweep_d1(u, A1, cc, maps[0], inv_dx2, grid.dt, req.ell,
                                      float(Mdiag[0]), sgn, bseg, target, store,
                                      mmin, mmax)
                else:
                    _kernels.sweep_d2(u, A1, cc, maps[0], maps[1], inv_dx2, grid.dt,
                                      req.ell, float(Mdiag[0]), float(Mdiag[1]), sgn,
                                      bseg, lat[0], lat[1], target, store, mmin, mmax)
                kend = k0 + off + ns
                if keep and kend in keep:
                    captured[kend] = u.copy()
        else:
            _generic_block(env, req, grid, coords, u, bvals, lat, times, k0, nsteps,
                           Mdiag, out if store else None, mmin, mmax, keep, captured)
        if not np.all(np.isfinite(u)):
            raise NumericalBlowup(f"solution blew up in block at time cell {tcell}")

    wall = time.perf_counter() - t0
    return u, u0, mmin, mmax, bmin, bmax, lateral_constant, out, captured, wall


def _generic_block(env, req, grid, coords, u, bvals, lat, times, k0, nsteps,
                   Mdiag, out, mmin, mmax, keep=None, captured=None):
    """Per-step path used when smoothing > 0 (coefficients vary inside cells).
    Slow; intended for probe-scale grids."""
    d = grid.dimension
    interior = tuple(slice(1, -1) for _ in range(d))
    inv_dx2 = 1.0 / (grid.dx * grid.dx)
    int_nodes = list(np.ndindex(*[n - 2 for n in grid.shape]))
    for s in range(nsteps):
        t = times[k0 + s + 1] - 0.5 * grid.dt  # inside the slab being integrated
        d2 = np.zeros(tuple(n - 2 for n in grid.shape) + (d,))
        for a in range(d):
            sl_m = [slice(1, -1)] * d
            sl_p = [slice(1, -1)] * d
            sl_m[a] = slice(0, -2)
            sl_p[a] = slice(2, None)
            d2[..., a] = (u[tuple(sl_m)] - 2.0 * u[interior] + u[tuple(sl_p)]) * inv_dx2
        Fv = np.empty(tuple(n - 2 for n in grid.shape))
        for idx in int_nodes:
            node = tuple(i + 1 for i in idx)
            x = [coords[a][node] for a in range(d)]
            Fv[idx] = env.evaluate_F(np.diag(Mdiag + d2[idx]), np.array(x), float(t))
        unew = u.copy()
        unew[interior] = u[interior] + grid.dt * (req.ell - Fv)
        unew[lat] = bvals[s]
        u[...] = unew
        np.minimum(mmin, u, out=mmin)
        np.maximum(mmax, u, out=mmax)
        if out is not None:
            out[k0 + 1 + s] = u
        if keep and (k0 + 1 + s) in keep:
            captured[k0 + 1 + s] = u.copy()


def solve_dirichlet(req: SolveRequest) -> Solution:
    """Full forward-Euler sweep; returns the space-time field.

    Boundary nodes carry the prescribed data exactly on every slice (the
    final slice keeps its lateral data too, although those nodes are not
    flagged as parabolic boundary).
    """
    u, u0, mmin, mmax, bmin, bmax, latc, out, _, wall = _sweep(req, store=True)
    field = Field(req.grid, out, parabolic_boundary_mask(req.grid))
    res = discrete_residual(req.env, req.M, field, req.ell, sample_slices=24)
    return Solution(field=field, residual=res, steps=req.grid.steps, wall_time=wall)


def solve_reduced(req: SolveRequest) -> ReducedSolution:
    u, u0, mmin, mmax, bmin, bmax, latc, _, _, wall = _sweep(req, store=False)
    return ReducedSolution(
        grid=req.grid, u0=u0, run_min=mmin, run_max=mmax,
        boundary_min=bmin, boundary_max=bmax, lateral_constant=latc,
        steps=req.grid.steps, wall_time=wall)


def solve_sampled(req: SolveRequest, keep) -> tuple[list[int], np.ndarray]:
    """Streamed solve that captures only the slices listed in `keep`;
    returns (sorted slice indices, values of shape (len(keep), *shape))."""
    ks = sorted(set(int(k) for k in keep))
    if any(k < 0 or k > req.grid.steps for k in ks):
        raise ValueError("keep indices outside the time range")
    *_, captured, wall = _sweep(req, store=False, keep=ks)
    return ks, np.stack([captured[k] for k in ks])


def discrete_F(env: Environment, M, u_slice: np.ndarray, grid: GridSpec, t: float, node) -> float:
    """Discrete operator value at one interior node: the family evaluated at
    M + diag(D_h^2 u) with 3-point second differences."""
    d = grid.dimension
    node = (node,) if np.isscalar(node) else tuple(node)
    if any(i < 1 or i > grid.shape[a] - 2 for a, i in enumerate(node)):
        raise ValueError("node must be interior")
    Mdiag = _diag_of(M, d)
    d2 = np.empty(d)
    for a in range(d):
        lo = list(node)
        hi = list(node)
        lo[a] -= 1
        hi[a] += 1
        d2[a] = (u_slice[tuple(lo)] - 2.0 * u_slice[node] + u_slice[tuple(hi)]) / grid.dx ** 2
    x = [grid.axis(a)[node[a]] for a in range(d)]
    return env.evaluate_F(np.diag(Mdiag + d2), np.array(x), float(t))


def _F_slice(env: Environment, Mdiag, u_slice, grid, t_slab: float) -> np.ndarray:
    """Vectorized interior operator values for the slab ending at t_slab
    (theta = 0 path)."""
    d = grid.dimension
    interior = tuple(slice(1, -1) for _ in range(d))
    inv_dx2 = 1.0 / (grid.dx * grid.dx)
    d2tot = []
    for a in range(d):
        sl_m = [slice(1, -1)] * d
        sl_p = [slice(1, -1)] * d
        sl_m[a] = slice(0, -2)
        sl_p[a] = slice(2, None)
        d2tot.append((u_slice[tuple(sl_m)] - 2.0 * u_slice[interior] + u_slice[tuple(sl_p)])
                     * inv_dx2 + Mdiag[a])
    cell_maps = [_node_cells(grid, a)[1:-1] for a in range(d)]
    tcell = math.ceil(t_slab - 0.5 * grid.dt) - 1
    A, c, maps = _block_tables(env, grid, cell_maps, tcell)
    if env.starred:
        A = -A
    if d == 1:
        Arow = A[maps[0]]
        crow = c[maps[0]]
        vals = -(Arow[..., 0] * d2tot[0][:, None, None]) + crow
    else:
        Arow = A[maps[0][:, None], maps[1][None, :]]
        crow = c[maps[0][:, None], maps[1][None, :]]
        vals = -(Arow[..., 0] * d2tot[0][..., None, None]
                 + Arow[..., 1] * d2tot[1][..., None, None]) + crow
    red = vals.max(axis=-1).min(axis=-1)
    return -red if env.starred else red


def discrete_residual(env: Environment, M, field: Field, ell: float,
                      sample_slices: Optional[int] = None) -> float:
    """sup over (sampled) interior nodes of
    |(u^{k+1} - u^k)/dt + F_h(M + D_h^2 u^k, x, t_k) - ell|."""
    grid = field.grid
    d = grid.dimension
    Mdiag = _diag_of(M, d)
    ks = np.arange(grid.steps)
    if sample_slices is not None and grid.steps > sample_slices:
        ks = np.unique(np.linspace(0, grid.steps - 1, sample_slices).astype(int))
    interior = tuple(slice(1, -1) for _ in range(d))
    worst = 0.0
    times = grid.times()
    for k in ks:
        t_slab = float(times[k + 1])  # coefficients of the slab (t_k, t_{k+1}]
        if env.spec.smoothing == 0.0:
            Fv = _F_slice(env, Mdiag, field.values[k], grid, t_slab)
        else:
            Fv = np.empty(tuple(n - 2 for n in grid.shape))
            for idx in np.ndindex(*Fv.shape):
                node = tuple(i + 1 for i in idx)
                Fv[idx] = discrete_F(env, M, field.values[k], grid,
                                     t_slab - 0.5 * grid.dt, node)
        du = (field.values[k + 1] - field.values[k])[interior] / grid.dt
        worst = max(worst, float(np.max(np.abs(du + Fv - ell))))
    # starred environments flip the operator inside _F_slice already
    return worst
