"""Random uniformly elliptic operator families on the unit space-time lattice.

An environment realizes F(M, x, t, omega): each unit cell (integer spatial
center, half-open unit time interval) draws its parameters by counter-based
hashing of (master seed, cell index), which gives exact stationarity under
integer shifts, independence of distinct cells (unit range of dependence)
and reproducibility independent of evaluation order.

All families are min-max tables of linear operators with diagonal diffusion:

    F(M, x, t) = min_i max_j ( -sum_a A[i,j,a] * M_aa + c[i,j] )

linear is a (1,1) table (one control drawn per cell), hjb-min an (S,1)
table (the global control list with cell-random offsets), isaacs-minmax an
(S,S) table with both matrices and offsets drawn per entry. The involution
omega -> omega* is evaluated as F(M, x, t, omega*) = -F(-M, x, t, omega) on
the same draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import rng

FAMILIES = ("linear", "hjb-min", "isaacs-minmax")


def pucci(M, lam: float, Lam: float, sign: str) -> float:
    """Pucci extremal operator of a symmetric matrix.

    sign "+": -lam * sum(e_i > 0) - Lam * sum(e_i < 0);
    sign "-": the inf counterpart. Eigenvalues are closed-form for d <= 2.
    """
    if not (0 < lam <= Lam):
        raise ValueError("need 0 < lam <= Lam")
    if sign not in ("+", "-"):
        raise ValueError("sign must be '+' or '-'")
    A = np.atleast_2d(np.asarray(M, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    scale = max(1.0, float(np.max(np.abs(A))))
    if np.max(np.abs(A - A.T)) > 1e-12 * scale:
        raise ValueError("matrix must be symmetric")
    d = A.shape[0]
    if d == 1:
        eigs = np.array([A[0, 0]])
    elif d == 2:
        mean = 0.5 * (A[0, 0] + A[1, 1])
        rad = math.hypot(0.5 * (A[0, 0] - A[1, 1]), A[0, 1])
        eigs = np.array([mean - rad, mean + rad])
    else:
        eigs = np.linalg.eigvalsh(A)
    pos = eigs[eigs > 0].sum()
    neg = eigs[eigs < 0].sum()
    if sign == "+":
        return float(-lam * pos - Lam * neg)
    return float(-Lam * pos - lam * neg)


@dataclass(frozen=True)
class EnvironmentSpec:
    """Parameters of the random operator family.

    controls holds the diagonal entries of the candidate diffusion matrices;
    their eigenvalues are expected to lie in [lam, Lam] (ellipticity_audit
    verifies this, deliberately out-of-range controls are representable so
    negative controls can be exercised). offset_range bounds the zero-order
    term, so K0 = max(|lo|, |hi|).
    """

    dimension: int
    lam: float
    Lam: float
    family: str
    controls: tuple[tuple[float, ...], ...]
    offset_range: tuple[float, float]
    seed: int
    smoothing: float = 0.0

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError("only d in {1, 2} is supported")
        if not (0 < self.lam <= self.Lam):
            raise ValueError("need 0 < lam <= Lam")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if not self.controls:
            raise ValueError("need at least one control matrix")
        if any(len(cm) != self.dimension for cm in self.controls):
            raise ValueError("control diagonals must have length d")
        if len(self.controls) > 4:
            raise ValueError("control lists are capped at 4 matrices")
        if not (0.0 <= self.smoothing < 0.5):
            raise ValueError("smoothing must lie in [0, 1/2)")
        if self.offset_range[0] > self.offset_range[1]:
            raise ValueError("offset_range must be ordered")

    @property
    def K0(self) -> float:
        return max(abs(self.offset_range[0]), abs(self.offset_range[1]))

    @property
    def n_controls(self) -> int:
        return len(self.controls)

    @property
    def table_shape(self) -> tuple[int, int]:
        s = self.n_controls
        return {"linear": (1, 1), "hjb-min": (s, 1), "isaacs-minmax": (s, s)}[self.family]

    def to_dict(self) -> dict:
        return {
            "dimension": self.dimension,
            "lambda": self.lam,
            "Lambda": self.Lam,
            "family": self.family,
            "controls": [list(cm) for cm in self.controls],
            "offset_range": list(self.offset_range),
            "seed": self.seed,
            "smoothing": self.smoothing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentSpec":
        return cls(
            dimension=int(d["dimension"]),
            lam=float(d["lambda"]),
            Lam=float(d["Lambda"]),
            family=str(d["family"]),
            controls=tuple(tuple(float(v) for v in cm) for cm in d["controls"]),
            offset_range=(float(d["offset_range"][0]), float(d["offset_range"][1])),
            seed=int(d["seed"]),
            smoothing=float(d.get("smoothing", 0.0)),
        )


@dataclass(frozen=True)
class CellDraw:
    """Deterministic draw of one cell: matrix indices and offsets, both
    shaped like the family's min-max table."""

    cell: tuple
    indices: np.ndarray
    offsets: np.ndarray
    matrices: np.ndarray  # (n_lo, n_hi, d) diagonal entries


@dataclass(frozen=True)
class Environment:
    spec: EnvironmentSpec
    starred: bool = False

    def involute(self) -> "Environment":
        return Environment(self.spec, not self.starred)

    def with_seed(self, seed: int) -> "Environment":
        return Environment(replace(self.spec, seed=int(seed)), self.starred)

    # ------------------------------------------------------------------ draws

    def _cell_hash(self, coords: list[np.ndarray]) -> np.ndarray:
        h = rng.combine(np.uint64(self.spec.seed & 0xFFFFFFFFFFFFFFFF), rng.TAG_CELL)
        h = np.broadcast_to(h, coords[0].shape).copy()
        for c in coords:
            h = rng.combine(h, np.asarray(c, dtype=np.int64))
        return h

    def cell_tables(self, *cell_coords) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized per-cell tables.

        cell_coords: d spatial integer arrays plus one temporal integer array,
        all broadcast to a common shape S. Returns (A, c) with A of shape
        S + (n_lo, n_hi, d) and c of shape S + (n_lo, n_hi). Involution does
        not change the draws (omega* reuses omega).
        """
        spec = self.spec
        d = spec.dimension
        if len(cell_coords) != d + 1:
            raise ValueError("need d spatial coordinates plus one temporal")
        coords = [np.asarray(c) for c in np.broadcast_arrays(*cell_coords)]
        base = self._cell_hash(coords)
        shape = base.shape
        nlo, nhi = spec.table_shape
        ctr = np.asarray(spec.controls, dtype=float)  # (S, d)
        lo, hi = spec.offset_range

        A = np.empty(shape + (nlo, nhi, d))
        c = np.empty(shape + (nlo, nhi))
        s = 0
        for i in range(nlo):
            for j in range(nhi):
                if spec.family == "hjb-min":
                    A[..., i, j, :] = ctr[i]
                else:
                    idx = rng.randint_below(rng.combine(base, s), spec.n_controls)
                    s += 1
                    A[..., i, j, :] = ctr[idx]
                c[..., i, j] = rng.uniform(rng.combine(base, s), lo, hi)
                s += 1
        return A, c

    def sample_cell(self, cell) -> CellDraw:
        """Draw for a single cell; `cell` is (i_1..i_d, j)."""
        cell = tuple(int(v) for v in cell)
        coords = [np.asarray([v]) for v in cell]
        A, c = self.cell_tables(*coords)
        nlo, nhi = self.spec.table_shape
        ctr = np.asarray(self.spec.controls, dtype=float)
        # recover indices by matching rows (draws are tiny)
        idx = np.zeros((nlo, nhi), dtype=int)
        for i in range(nlo):
            for j in range(nhi):
                row = A[0, i, j]
                idx[i, j] = next(k for k in range(len(ctr)) if np.array_equal(ctr[k], row))
        return CellDraw(cell=cell, indices=idx, offsets=c[0].copy(), matrices=A[0].copy())

    # ------------------------------------------------------------- evaluation

    @staticmethod
    def _reduce_table(vals: np.ndarray) -> np.ndarray:
        """min over rows of max over columns, on the last two axes."""
        return vals.max(axis=-1).min(axis=-1)

    def _F_plain_from_tables(self, A: np.ndarray, c: np.ndarray, Mdiag: np.ndarray) -> np.ndarray:
        vals = c - np.einsum("...a,a->...", A, Mdiag)
        return self._reduce_table(vals)

    def F_on_tables(self, A: np.ndarray, c: np.ndarray, M) -> np.ndarray:
        """Evaluate the family on precomputed cell tables (vectorized)."""
        Mdiag = _diag_of(M, self.spec.dimension)
        if self.starred:
            return -self._F_plain_from_tables(A, c, -Mdiag)
        return self._F_plain_from_tables(A, c, Mdiag)

    def _blend_weights(self, coord: float, face_offset: float):
        """Cells overlapping `coord` with a telescoping linear partition of
        unity of width `smoothing` across the faces. face_offset is 0.5 for
        space (cells centered at integers), 0.0 for time (cells (j, j+1])."""
        theta = self.spec.smoothing
        if face_offset == 0.5:
            i = math.floor(coord + 0.5)
        else:
            i = math.ceil(coord) - 1
        if theta == 0.0:
            return [(i, 1.0)]

        def sigma(v):  # 0 -> 1 across [-theta/2, theta/2]
            return min(1.0, max(0.0, v / theta + 0.5))

        left_face = i - face_offset if face_offset == 0.5 else float(i)
        right_face = left_face + 1.0
        w = sigma(coord - left_face) - sigma(coord - right_face)
        out = [(i, w)]
        wl = 1.0 - sigma(coord - left_face)
        if wl > 0.0:
            out.append((i - 1, wl))
        wr = sigma(coord - right_face)
        if wr > 0.0:
            out.append((i + 1, wr))
        return out

    def evaluate_F(self, M, x, t: float) -> float:
        """Pointwise F(M, x, t, omega); pure in (M, x, t) given the environment.

        With smoothing > 0 the neighbouring cell tables are blended
        entrywise by the partition of unity, which preserves uniform
        ellipticity (convex combinations of admissible diagonals).
        """
        spec = self.spec
        d = spec.dimension
        Mdiag = _diag_of(M, d)
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        if xs.shape != (d,):
            raise ValueError("point dimension mismatch")
        if self.starred:
            return -Environment(spec, False).evaluate_F(-np.asarray(M, dtype=float), x, t)

        per_axis = [self._blend_weights(float(v), 0.5) for v in xs]
        per_axis.append(self._blend_weights(float(t), 0.0))
        nlo, nhi = spec.table_shape
        A = np.zeros((nlo, nhi, d))
        c = np.zeros((nlo, nhi))
        stack = [((), 1.0)]
        for choices in per_axis:
            stack = [(cell + (i,), w * wi) for cell, w in stack for i, wi in choices if w * wi > 0]
        for cell, w in stack:
            coords = [np.asarray([v]) for v in cell]
            Ac, cc = self.cell_tables(*coords)
            A += w * Ac[0]
            c += w * cc[0]
        return float(self._F_plain_from_tables(A, c, Mdiag))


def _diag_of(M, d: int) -> np.ndarray:
    """Diagonal of a matrix shift: scalars (d=1), length-d diagonals, or full
    symmetric matrices (off-diagonal entries do not couple to diagonal
    diffusion and are ignored)."""
    a = np.asarray(M, dtype=float)
    if a.ndim == 0:
        if d != 1:
            raise ValueError("scalar M only valid for d=1")
        return a.reshape(1)
    if a.ndim == 1:
        if a.shape != (d,):
            raise ValueError("diagonal M has wrong length")
        return a
    if a.shape != (d, d):
        raise ValueError("matrix M has wrong shape")
    if np.max(np.abs(a - a.T)) > 1e-12 * max(1.0, np.max(np.abs(a))):
        raise ValueError("M must be symmetric")
    return np.diag(a).copy()


def F_range_on_cube(env: Environment, cube, M) -> tuple[float, float]:
    """(min, max) of F(M, x, t) over all unit cells of an integer-aligned cube.

    Exact for smoothing 0 (the operator is cellwise constant); cube levels
    below 0 are resolved by their covering unit cell.
    """
    if cube.level < 0:
        lo, hi, t1, t2 = cube.bounds()
        mids = [0.5 * (a + b) for a, b in zip(lo, hi)]
        coords = [np.asarray([math.floor(v + 0.5)]) for v in mids]
        coords.append(np.asarray([math.ceil(0.5 * (t1 + t2)) - 1]))
        A, c = env.cell_tables(*coords)
        v = float(env.F_on_tables(A, c, M)[0])
        return v, v
    side = 3 ** cube.level
    depth = 9 ** cube.level
    # spatial cells: `side` consecutive integers centered at side * i (side is odd)
    axes = [np.arange(side * idx - (side - 1) // 2, side * idx + (side - 1) // 2 + 1)
            for idx in cube.spatial]
    taxis = np.arange(depth * cube.temporal, depth * (cube.temporal + 1))
    grids = np.meshgrid(*axes, taxis, indexing="ij")
    A, c = env.cell_tables(*grids)
    vals = env.F_on_tables(A, c, M)
    return float(vals.min()), float(vals.max())


def ellipticity_audit(env: Environment, trials: int, seed: int = 0,
                      m_scale: float = 3.0, box: float = 10.0) -> dict:
    """Monte Carlo check of the Pucci sandwich
    M^-(M-N) <= F(M,.) - F(N,.) <= M^+(M-N) on random probes.

    Violations are reported, never raised; exact-arithmetic families must
    stay below 1e-12.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    d = env.spec.dimension
    lam, Lam = env.spec.lam, env.spec.Lam
    gen = np.random.default_rng(seed)
    worst = 0.0
    violations = 0
    for _ in range(trials):
        M = _rand_sym(gen, d, m_scale)
        N = _rand_sym(gen, d, m_scale)
        x = gen.uniform(-box, box, size=d)
        t = gen.uniform(-box, box)
        diff = env.evaluate_F(M, x, t) - env.evaluate_F(N, x, t)
        up = pucci(M - N, lam, Lam, "+")
        lo = pucci(M - N, lam, Lam, "-")
        gap = max(diff - up, lo - diff, 0.0)
        if gap > 1e-12:
            violations += 1
        worst = max(worst, gap)
    return {"trials": trials, "violations": violations, "max_violation": worst}


def boundedness_audit(env: Environment, trials: int, seed: int = 0, box: float = 10.0) -> dict:
    """Check |F(0, x, t)| <= K0 on random probes."""
    gen = np.random.default_rng(seed)
    d = env.spec.dimension
    zero = np.zeros((d, d))
    worst = 0.0
    for _ in range(trials):
        x = gen.uniform(-box, box, size=d)
        t = gen.uniform(-box, box)
        worst = max(worst, abs(env.evaluate_F(zero, x, t)))
    return {"trials": trials, "max_abs_F0": worst, "K0": env.spec.K0,
            "ok": worst <= env.spec.K0 + 1e-12}


def _rand_sym(gen, d: int, scale: float) -> np.ndarray:
    B = gen.uniform(-scale, scale, size=(d, d))
    return 0.5 * (B + B.T)
