"""numba kernels for the explicit monotone sweep (piecewise-constant cells).

One call advances a whole unit-time block during which the coefficient
tables are frozen. The caller owns the buffers; `u` holds the entry slice
and receives the exit slice, running extrema are folded in place, and new
slices are optionally written to `out` (rows 0..nsteps-1 for the slices
k0+1..k0+nsteps).
"""

import numba
import numpy as np


@numba.njit(cache=True)
def sweep_d1(u, A, c, cellx, inv_dx2, dt, ell, m0, sgn, bvals, out, store, mmin, mmax):
    nsteps = bvals.shape[0]
    n = u.shape[0]
    nlo = A.shape[1]
    nhi = A.shape[2]
    w = np.empty_like(u)
    src = u
    dst = w
    for s in range(nsteps):
        dst[0] = bvals[s, 0]
        dst[n - 1] = bvals[s, 1]
        for i in range(1, n - 1):
            d2 = (src[i - 1] - 2.0 * src[i] + src[i + 1]) * inv_dx2 + m0
            ci = cellx[i]
            best_lo = np.inf
            for a in range(nlo):
                best_hi = -np.inf
                for b in range(nhi):
                    v = -A[ci, a, b] * d2 + c[ci, a, b]
                    if v > best_hi:
                        best_hi = v
                if best_hi < best_lo:
                    best_lo = best_hi
            dst[i] = src[i] + dt * (ell - sgn * best_lo)
        for i in range(n):
            vi = dst[i]
            if vi < mmin[i]:
                mmin[i] = vi
            if vi > mmax[i]:
                mmax[i] = vi
        if store:
            for i in range(n):
                out[s, i] = dst[i]
        src, dst = dst, src
    if nsteps % 2 == 1:
        for i in range(n):
            u[i] = src[i]


@numba.njit(cache=True)
def sweep_d2(u, A, c, celly, cellx, inv_dx2, dt, ell, m0y, m0x, sgn,
             bvals, b_iy, b_ix, out, store, mmin, mmax):
    nsteps = bvals.shape[0]
    ny = u.shape[0]
    nx = u.shape[1]
    nlo = A.shape[2]
    nhi = A.shape[3]
    nlat = b_iy.shape[0]
    w = np.empty_like(u)
    src = u
    dst = w
    for s in range(nsteps):
        for q in range(nlat):
            dst[b_iy[q], b_ix[q]] = bvals[s, q]
        for iy in range(1, ny - 1):
            cy = celly[iy]
            for ix in range(1, nx - 1):
                d2y = (src[iy - 1, ix] - 2.0 * src[iy, ix] + src[iy + 1, ix]) * inv_dx2 + m0y
                d2x = (src[iy, ix - 1] - 2.0 * src[iy, ix] + src[iy, ix + 1]) * inv_dx2 + m0x
                cx = cellx[ix]
                best_lo = np.inf
                for a in range(nlo):
                    best_hi = -np.inf
                    for b in range(nhi):
                        v = -(A[cy, cx, a, b, 0] * d2y + A[cy, cx, a, b, 1] * d2x) + c[cy, cx, a, b]
                        if v > best_hi:
                            best_hi = v
                    if best_hi < best_lo:
                        best_lo = best_hi
                dst[iy, ix] = src[iy, ix] + dt * (ell - sgn * best_lo)
        for iy in range(ny):
            for ix in range(nx):
                vi = dst[iy, ix]
                if vi < mmin[iy, ix]:
                    mmin[iy, ix] = vi
                if vi > mmax[iy, ix]:
                    mmax[iy, ix] = vi
        if store:
            for iy in range(ny):
                for ix in range(nx):
                    out[s, iy, ix] = dst[iy, ix]
        src, dst = dst, src
    if nsteps % 2 == 1:
        for iy in range(ny):
            for ix in range(nx):
                u[iy, ix] = src[iy, ix]


@numba.njit(cache=True)
def lower_hull_1d(v):
    """Vertex indices of the lower convex hull of (i, v[i]), i = 0..n-1."""
    n = v.shape[0]
    stack = np.empty(n, dtype=np.int64)
    top = 0
    for i in range(n):
        while top >= 2:
            i1 = stack[top - 2]
            i2 = stack[top - 1]
            # pop i2 unless it lies strictly below the chord i1 -> i
            if (v[i2] - v[i1]) * (i - i1) >= (v[i] - v[i1]) * (i2 - i1):
                top -= 1
            else:
                break
        stack[top] = i
        top += 1
    return stack[:top].copy()
