"""Counter-based hashing: reproducible randomness with random access.

Every random quantity in the package is a pure function of a 64-bit master
seed and an integer counter (cell coordinates, sample index, stream tag),
computed with the splitmix64 finalizer. This gives random access to any
cell of the coefficient field, byte-identical results regardless of
traversal order or worker count, and cheap vectorization over cell arrays.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / float(1 << 53)

# domain-separation tags so distinct consumers never share a stream
TAG_CELL = 0x5EED_CE11
TAG_SAMPLE = 0x5EED_5A3B
TAG_BOUNDARY = 0x5EED_B0DA


def _as_u64(x) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype.kind in "iu":
        return a.astype(np.int64, copy=False).view(np.uint64) if a.dtype.kind == "i" else a.astype(np.uint64, copy=False)
    raise TypeError(f"integer input required, got dtype {a.dtype}")


def mix64(x) -> np.ndarray:
    """splitmix64 finalizer; accepts python ints, int arrays, any shape."""
    z = _as_u64(x).copy()
    with np.errstate(over="ignore"):
        z += _GAMMA
        z ^= z >> np.uint64(30)
        z *= _MIX1
        z ^= z >> np.uint64(27)
        z *= _MIX2
        z ^= z >> np.uint64(31)
    return z


def combine(h, c) -> np.ndarray:
    """Fold counter c into hash state h (both broadcastable)."""
    with np.errstate(over="ignore"):
        return mix64(_as_u64(h) ^ mix64(c))


def u01(h) -> np.ndarray:
    """Map hash words to uniform doubles in [0, 1)."""
    return (_as_u64(h) >> np.uint64(11)).astype(np.float64) * _INV53


def uniform(h, lo: float, hi: float) -> np.ndarray:
    return lo + (hi - lo) * u01(h)


def randint_below(h, n: int) -> np.ndarray:
    """Uniform integers in [0, n); n is tiny so the 53-bit bias is nil."""
    return np.minimum((u01(h) * n).astype(np.int64), n - 1)


def spawn_seeds(master: int, n: int, tag: int = TAG_SAMPLE) -> np.ndarray:
    """Derive n independent child seeds from a master seed, as uint64."""
    base = combine(np.uint64(master & 0xFFFFFFFFFFFFFFFF), tag)
    return combine(base, np.arange(n, dtype=np.uint64))
