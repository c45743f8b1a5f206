"""Independent reference implementations the tests check against.

Deliberately naive and slow: exact rational arithmetic for binary16
rounding, triple loops for matrix products, central differences for
gradients. None of these share code with the library paths they verify.
"""

from __future__ import annotations

import math
import struct
from bisect import bisect_left
from fractions import Fraction

import numpy as np

_GRID: list[tuple[Fraction, int]] | None = None
_VIRTUAL_OVERFLOW = Fraction(65536)


def _binary16_grid() -> list[tuple[Fraction, int]]:
    """All non-negative finite binary16 values as exact fractions, plus the
    virtual next value above the max (needed for the overflow tie)."""
    global _GRID
    if _GRID is None:
        vals = []
        for bits in range(0x7C00):  # exponent 0x1F (inf/nan) excluded
            exp = bits >> 10
            frac = bits & 0x3FF
            if exp == 0:
                v = Fraction(frac, 1 << 24)
            else:
                v = Fraction(frac + 0x400, 1 << 10) * Fraction(2) ** (exp - 15)
            vals.append((v, bits))
        vals.append((_VIRTUAL_OVERFLOW, 0x7C00))  # even pattern beyond the range
        _GRID = vals
    return _GRID


def binary16_round(x: float) -> float:
    """Round a float32 value to binary16 (nearest, ties to even), as float.

    Built from the format definition with exact arithmetic; independent of
    both numpy's float16 and the library's quantizer.
    """
    xf = np.float32(x)
    if math.isnan(xf):
        return math.nan
    if math.isinf(xf):
        return float(xf)
    bits = struct.unpack("<I", struct.pack("<f", float(xf)))[0]
    sign = -1.0 if bits >> 31 else 1.0
    mag = Fraction(abs(float(xf)))
    grid = _binary16_grid()
    values = [v for v, _ in grid]
    i = bisect_left(values, mag)
    if i >= len(values):  # beyond even the virtual overflow value
        return sign * math.inf
    if values[i] == mag:
        chosen = grid[i]
    else:
        lo, hi = grid[i - 1], grid[i]  # mag > 0 here, so i >= 1
        dlo, dhi = mag - lo[0], hi[0] - mag
        if dlo < dhi:
            chosen = lo
        elif dhi < dlo:
            chosen = hi
        else:  # exact tie: pick the pattern with even last bit
            chosen = lo if lo[1] % 2 == 0 else hi
    if chosen[0] >= _VIRTUAL_OVERFLOW:
        return sign * math.inf
    return sign * float(chosen[0])


def matmul_triple_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Entry-by-entry product in float32, the slow way."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for t in range(k):
                acc = np.float32(acc + np.float32(a[i, t]) * np.float32(b[t, j]))
            out[i, j] = acc
    return out


def finite_difference(fn, arrays: list[np.ndarray], index: int, eps: float = 1e-3) -> np.ndarray:
    """Central differences of sum(fn(arrays)) with respect to arrays[index].

    fn must treat its inputs as read-only and return a numpy array (any
    shape); the reduction to a scalar is an implicit all-ones projection.
    """
    target = arrays[index]
    grad = np.zeros(target.shape, dtype=np.float64)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + np.float32(eps)
        up = float(np.sum(fn(arrays), dtype=np.float64))
        flat[i] = saved - np.float32(eps)
        down = float(np.sum(fn(arrays), dtype=np.float64))
        flat[i] = saved
        gflat[i] = (up - down) / (2.0 * eps)
    return grad.astype(np.float32)


def assert_grad_close(analytic: np.ndarray, fd: np.ndarray, rel: float = 1e-2,
                      abs_tol: float = 1e-4, label: str = "") -> None:
    """Per-element |analytic - fd| <= max(rel * |fd|, abs_tol)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    tol = np.maximum(rel * np.abs(fd), abs_tol)
    bad = np.abs(analytic - fd) > tol
    assert not bad.any(), (
        f"{label}: {int(bad.sum())}/{bad.size} gradient entries off; worst "
        f"analytic={analytic[bad][0]} fd={fd[bad][0]}"
    )
