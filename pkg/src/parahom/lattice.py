"""Triadic parabolic cube geometry and space-time grid fields.

A level-n cube has spatial side 3^n and temporal depth 3^(2n); its
translates tile space-time, each cube splitting into 3^(d+2) children one
level down. The reference cube at level n is
[-3^n/2, 3^n/2)^d x (0, 3^(2n)], so spatial cells are centered at integer
points and time cells are the half-open intervals (j, j+1].

Grids refine each unit of space with r nodes per axis and pick the largest
CFL-admissible time step that divides unit time evenly, so nodes of a child
cube are a subset of the parent's and restriction is a pure index slice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CubeIndex:
    """Translate (i, j) of the level-n reference cube."""

    level: int
    spatial: tuple[int, ...]
    temporal: int

    @property
    def dimension(self) -> int:
        return len(self.spatial)

    @property
    def side(self) -> float:
        return 3.0 ** self.level

    @property
    def depth(self) -> float:
        return 9.0 ** self.level

    @property
    def volume(self) -> float:
        return 3.0 ** (self.level * (self.dimension + 2))

    def bounds(self):
        """((lo_a,), (hi_a,), t1, t2): spatial [lo, hi) per axis, time (t1, t2]."""
        s = self.side
        lo = tuple(s * (i - 0.5) for i in self.spatial)
        hi = tuple(s * (i + 0.5) for i in self.spatial)
        t1 = self.depth * self.temporal
        return lo, hi, t1, t1 + self.depth

    def contains(self, x, t: float) -> bool:
        lo, hi, t1, t2 = self.bounds()
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        if xs.shape != (self.dimension,):
            raise ValueError("point dimension mismatch")
        return bool(np.all(xs >= lo) and np.all(xs < hi) and t1 < t <= t2)


def cube_of_point(level: int, x, t: float) -> CubeIndex:
    """The unique level-n cube containing (x, t).

    Space uses the half-open convention [i - 1/2, i + 1/2) (scaled by 3^n),
    time the half-open (j, j+1] (scaled by 9^n), so integer-multiple times
    belong to the cube below them.
    """
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    side = 3.0 ** level
    depth = 9.0 ** level
    spatial = tuple(int(math.floor(v / side + 0.5)) for v in xs)
    temporal = int(math.ceil(t / depth)) - 1
    return CubeIndex(level, spatial, temporal)


def children(cube: CubeIndex) -> list[CubeIndex]:
    """The 3^(d+2) level-(n-1) cubes tiling `cube`."""
    m = cube.level - 1
    axes = [range(3 * i - 1, 3 * i + 2) for i in cube.spatial]
    times = range(9 * cube.temporal, 9 * cube.temporal + 9)
    out = []

    def rec(prefix, rest):
        if not rest:
            for j in times:
                out.append(CubeIndex(m, tuple(prefix), j))
            return
        for i in rest[0]:
            rec(prefix + [i], rest[1:])

    rec([], axes)
    return out


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time grid over a box.

    Nodes sit at origin[a] + i*dx along axis a (i = 0..shape[a]-1) and at
    times t0 + k*dt (k = 0..steps). Slice 0 carries the initial data.
    """

    dimension: int
    dx: float
    dt: float
    shape: tuple[int, ...]
    steps: int
    origin: tuple[float, ...]
    t0: float

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError("only d in {1, 2} is supported")
        if len(self.shape) != self.dimension or len(self.origin) != self.dimension:
            raise ValueError("shape/origin arity must match dimension")
        if self.dx <= 0 or self.dt <= 0 or self.steps < 1:
            raise ValueError("dx, dt and steps must be positive")
        if any(n < 2 for n in self.shape):
            raise ValueError("need at least 2 nodes per axis")

    def axis(self, a: int) -> np.ndarray:
        return self.origin[a] + self.dx * np.arange(self.shape[a])

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def t_end(self) -> float:
        return self.t0 + self.dt * self.steps

    def node_coords(self) -> list[np.ndarray]:
        """Meshgrid arrays (one per axis, each of shape `shape`, ij indexing)."""
        return list(np.meshgrid(*[self.axis(a) for a in range(self.dimension)], indexing="ij"))

    @property
    def box_volume(self) -> float:
        v = self.dt * self.steps
        for a in range(self.dimension):
            v *= self.dx * (self.shape[a] - 1)
        return v

    def cfl_ok(self, lam_max: float) -> bool:
        return self.dt <= self.dx * self.dx / (2.0 * self.dimension * lam_max) * (1 + 1e-12)


def cfl_dt(dx: float, lam_max: float, dimension: int) -> float:
    """Largest explicit time step that keeps the 2d+1-point update monotone."""
    if dx <= 0:
        raise ValueError("dx must be positive")
    return dx * dx / (2.0 * dimension * lam_max)


def steps_per_unit(r: int, lam_max: float, dimension: int, align: int = 1) -> int:
    """Number of time steps per unit time: ceil(1/cfl_dt), rounded up to a
    multiple of `align` (used to keep 9-adic slabs on step boundaries)."""
    base = math.ceil(1.0 / cfl_dt(1.0 / r, lam_max, dimension) - 1e-12)
    return align * math.ceil(base / align)


def grid_for_cube(cube: CubeIndex, refinement: int, lam_max: float) -> GridSpec:
    """CFL-admissible grid over a cube with r nodes per unit length.

    dx = 1/r is shared across levels, dt = 1/(steps per unit time) likewise,
    so grids of nested cubes nest exactly. Refinements below 3 are rejected:
    subdifferential measures are meaningless on 2-node slices.
    """
    if refinement < 3:
        raise ValueError("refinement must be at least 3")
    d = cube.dimension
    if cube.level < 0:
        scale = 3 ** (-cube.level)
        if refinement % scale:
            raise ValueError(f"level {cube.level} needs refinement divisible by {scale}")
        align = scale * scale
    else:
        align = 1
    nx = round(cube.side * refinement) + 1
    spu = steps_per_unit(refinement, lam_max, d, align)
    steps = round(cube.depth * spu)
    lo, _, t1, _ = cube.bounds()
    return GridSpec(
        dimension=d,
        dx=1.0 / refinement,
        dt=1.0 / spu,
        shape=(nx,) * d,
        steps=steps,
        origin=lo,
        t0=t1,
    )


def grid_for_box(origin, lengths, t0: float, duration: float, refinement: int,
                 lam_max: float, dimension: int) -> GridSpec:
    """Grid over an arbitrary box (used by the homogenization experiments).

    Side lengths and duration must be multiples of 1/r and 1/spu; this keeps
    unit-cell bookkeeping exact.
    """
    if refinement < 3:
        raise ValueError("refinement must be at least 3")
    spu = steps_per_unit(refinement, lam_max, dimension)
    shape = []
    for L in np.atleast_1d(np.asarray(lengths, dtype=float)):
        n = L * refinement
        if abs(n - round(n)) > 1e-9:
            raise ValueError("box side must be a multiple of 1/refinement")
        shape.append(int(round(n)) + 1)
    k = duration * spu
    if abs(k - round(k)) > 1e-9:
        raise ValueError("duration must be a multiple of the time step")
    return GridSpec(
        dimension=dimension,
        dx=1.0 / refinement,
        dt=1.0 / spu,
        shape=tuple(shape),
        steps=int(round(k)),
        origin=tuple(np.atleast_1d(np.asarray(origin, dtype=float)).tolist()),
        t0=t0,
    )


def parabolic_boundary_mask(grid: GridSpec) -> np.ndarray:
    """True on the parabolic boundary: the whole initial slice plus the
    lateral spatial boundary at all times strictly before the final slice.
    The final slice (interior and lateral alike) is not boundary."""
    mask = np.zeros((grid.steps + 1,) + grid.shape, dtype=bool)
    mask[0] = True
    lateral = _lateral_mask(grid.shape)
    mask[1:grid.steps] |= lateral
    return mask


def _lateral_mask(shape: tuple[int, ...]) -> np.ndarray:
    lat = np.zeros(shape, dtype=bool)
    for a in range(len(shape)):
        sl = [slice(None)] * len(shape)
        sl[a] = 0
        lat[tuple(sl)] = True
        sl[a] = -1
        lat[tuple(sl)] = True
    return lat


@dataclass
class Field:
    """Grid function with parabolic-boundary annotation.

    values has shape (steps+1, *shape); boundary marks the nodes carrying
    Dirichlet data.
    """

    grid: GridSpec
    values: np.ndarray
    boundary: np.ndarray

    def __post_init__(self):
        want = (self.grid.steps + 1,) + self.grid.shape
        if self.values.shape != want:
            raise ValueError(f"values shape {self.values.shape} != {want}")
        if self.boundary.shape != want:
            raise ValueError("boundary mask shape mismatch")

    @classmethod
    def from_function(cls, grid: GridSpec, f) -> "Field":
        """Sample f(x..., t) on the grid; f must broadcast over coordinate arrays."""
        coords = grid.node_coords()
        vals = np.empty((grid.steps + 1,) + grid.shape)
        for k, t in enumerate(grid.times()):
            vals[k] = f(*coords, t)
        return cls(grid, vals, parabolic_boundary_mask(grid))

    def spatial_interior_mask(self) -> np.ndarray:
        return ~_lateral_mask(self.grid.shape)

    def interior_mask(self) -> np.ndarray:
        """Nodes that are members of the open cylinder Q: spatially interior
        and strictly after the initial time."""
        m = np.zeros_like(self.boundary)
        m[1:] = self.spatial_interior_mask()
        return m

    def lateral_time_constant(self, tol: float = 0.0) -> bool:
        lat = _lateral_mask(self.grid.shape)
        vals = self.values[:, lat]
        return bool(np.max(np.abs(vals - vals[0]), initial=0.0) <= tol)

    def running_min_final(self) -> np.ndarray:
        return self.values.min(axis=0)


def restrict(field: Field, cube: CubeIndex) -> Field:
    """Restriction of a field to an aligned subcube (pure index slice).

    The parabolic-boundary mask is recomputed for the subcube, so parent
    interior nodes on the subcube's initial slice become boundary nodes.
    """
    g = field.grid
    if cube.dimension != g.dimension:
        raise ValueError("dimension mismatch")
    lo, hi, t1, t2 = cube.bounds()
    idx = []
    for a in range(g.dimension):
        i0 = (lo[a] - g.origin[a]) / g.dx
        i1 = (hi[a] - g.origin[a]) / g.dx
        if abs(i0 - round(i0)) > 1e-9 or abs(i1 - round(i1)) > 1e-9:
            raise ValueError("subcube is not node-aligned with the field grid")
        i0, i1 = int(round(i0)), int(round(i1))
        if i0 < 0 or i1 > g.shape[a] - 1:
            raise ValueError("subcube extends outside the field box")
        idx.append((i0, i1))
    k0 = (t1 - g.t0) / g.dt
    k1 = (t2 - g.t0) / g.dt
    if abs(k0 - round(k0)) > 1e-9 or abs(k1 - round(k1)) > 1e-9:
        raise ValueError("subcube time slab is not slice-aligned")
    k0, k1 = int(round(k0)), int(round(k1))
    if k0 < 0 or k1 > g.steps:
        raise ValueError("subcube extends outside the field time range")

    slicer = (slice(k0, k1 + 1),) + tuple(slice(i0, i1 + 1) for i0, i1 in idx)
    sub = GridSpec(
        dimension=g.dimension,
        dx=g.dx,
        dt=g.dt,
        shape=tuple(i1 - i0 + 1 for i0, i1 in idx),
        steps=k1 - k0,
        origin=tuple(lo),
        t0=t1,
    )
    return Field(sub, field.values[slicer].copy(), parabolic_boundary_mask(sub))
