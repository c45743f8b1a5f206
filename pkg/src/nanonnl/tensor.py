"""Dense numeric arrays with an emulated half-precision storage mode.

Arrays are contiguous, row-major float32 buffers. An array declared F16
keeps every element on the IEEE-754 binary16 grid: each write rounds the
new values to the nearest half (ties to even) and stores the result back
as float32. This gives numerics identical to true half-precision storage
while all arithmetic, dot products and reductions run in float32.

Random numbers come from a counter-based SplitMix64 stream (documented in
the README) so that any seeded run is bit-reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidRange, ShapeMismatch

__all__ = [
    "Dtype",
    "NdArray",
    "quantize_f16",
    "has_inf_or_nan",
    "matmul",
    "add",
    "sub",
    "mul",
    "maximum",
    "fill",
    "scale",
    "RngState",
    "seeded_uniform",
]


class Dtype(Enum):
    """Declared storage precision of an array."""

    F32 = "f32"
    F16 = "f16"


def _quantize_f16_values(values: np.ndarray) -> np.ndarray:
    # float16 round trip is exactly binary16 round-to-nearest-even;
    # magnitudes above 65504 overflow to inf, subnormals survive.
    with np.errstate(over="ignore", invalid="ignore"):
        return values.astype(np.float16).astype(np.float32)


def quantize_f16(x: float) -> float:
    """Round a float32 value to the nearest binary16 value, returned as float32.

    Total on all inputs: overflow beyond 65504 gives +/-inf, NaN stays NaN,
    subnormal halves are preserved.
    """
    return float(_quantize_f16_values(np.asarray(x, dtype=np.float32)))


class NdArray:
    """Contiguous row-major float32 buffer with a declared precision.

    F16 arrays hold only binary16-representable values; every mutating
    entry point re-quantizes. The buffer can be released (dropped) while
    shape and dtype stay known; reading a released buffer is an error.
    """

    __slots__ = ("dtype", "shape", "_values")

    def __init__(self, shape, dtype: Dtype = Dtype.F32):
        self.shape = tuple(int(d) for d in shape)
        if any(d < 0 for d in self.shape):
            raise ShapeMismatch(f"negative extent in shape {self.shape}")
        self.dtype = dtype
        self._values = np.zeros(self.shape, dtype=np.float32)

    @classmethod
    def from_values(cls, values, dtype: Dtype = Dtype.F32) -> "NdArray":
        arr = cls(np.shape(values), dtype)
        arr.write(values)
        return arr

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def is_set(self) -> bool:
        """Whether the buffer currently holds values (not released)."""
        return self._values is not None

    @property
    def values(self) -> np.ndarray:
        """The underlying float32 buffer. Treat as read-only; mutate via write()."""
        if self._values is None:
            raise ValueError("buffer has been released")
        return self._values

    def write(self, values) -> None:
        """Replace the contents, quantizing to binary16 if dtype is F16."""
        src = np.asarray(values, dtype=np.float32)
        if src.shape != self.shape:
            raise ShapeMismatch(f"cannot write shape {src.shape} into {self.shape}")
        if self.dtype is Dtype.F16:
            src = _quantize_f16_values(src)
        if self._values is None:
            self._values = np.empty(self.shape, dtype=np.float32)
        np.copyto(self._values, src)

    def accumulate(self, values) -> None:
        """In-place add (float32 math), re-quantizing the result if F16."""
        src = np.asarray(values, dtype=np.float32)
        if src.shape != self.shape:
            raise ShapeMismatch(f"cannot accumulate shape {src.shape} into {self.shape}")
        buf = self.values
        buf += src
        if self.dtype is Dtype.F16:
            np.copyto(buf, _quantize_f16_values(buf))

    def fill(self, value: float) -> None:
        if self._values is None:
            self._values = np.empty(self.shape, dtype=np.float32)
        v = np.float32(value)
        if self.dtype is Dtype.F16:
            v = np.float32(quantize_f16(float(v)))
        self._values.fill(v)

    def release(self) -> None:
        """Drop the buffer. Shape/dtype stay; next write reallocates."""
        self._values = None

    def copy(self) -> "NdArray":
        out = NdArray(self.shape, self.dtype)
        if self._values is not None:
            np.copyto(out._values, self._values)
        else:
            out._values = None
        return out

    def tobytes(self) -> bytes:
        return np.ascontiguousarray(self.values).tobytes()

    def __repr__(self):
        state = "released" if self._values is None else repr(self._values)
        return f"NdArray(shape={self.shape}, dtype={self.dtype.value}, values={state})"


def has_inf_or_nan(a: NdArray) -> bool:
    """True iff any element is +/-inf or NaN."""
    if a.size == 0:
        return False
    return not bool(np.isfinite(a.values).all())


def _check_same_shape(a: NdArray, b: NdArray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: NdArray, b: NdArray, dtype: Dtype | None = None) -> NdArray:
    """Rank-2 matrix product, accumulated in float32.

    Output precision defaults to F32; pass dtype to store the result on
    the binary16 grid (the accumulation itself still runs in float32).
    """
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.values, b.values)
    return NdArray.from_values(out, dtype or Dtype.F32)


def add(a: NdArray, b: NdArray, dtype: Dtype | None = None) -> NdArray:
    _check_same_shape(a, b, "add")
    return NdArray.from_values(a.values + b.values, dtype or Dtype.F32)


def sub(a: NdArray, b: NdArray, dtype: Dtype | None = None) -> NdArray:
    _check_same_shape(a, b, "sub")
    return NdArray.from_values(a.values - b.values, dtype or Dtype.F32)


def mul(a: NdArray, b: NdArray, dtype: Dtype | None = None) -> NdArray:
    _check_same_shape(a, b, "mul")
    return NdArray.from_values(a.values * b.values, dtype or Dtype.F32)


def maximum(a: NdArray, b: NdArray, dtype: Dtype | None = None) -> NdArray:
    _check_same_shape(a, b, "max")
    return NdArray.from_values(np.maximum(a.values, b.values), dtype or Dtype.F32)


def fill(shape, value: float, dtype: Dtype = Dtype.F32) -> NdArray:
    out = NdArray(shape, dtype)
    out.fill(value)
    return out


def scale(a: NdArray, factor: float, dtype: Dtype | None = None) -> NdArray:
    return NdArray.from_values(a.values * np.float32(factor), dtype or Dtype.F32)


# --- deterministic random numbers -------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4B7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> np.uint64(30))) * _MIX1) & _MASK64
    z = ((z ^ (z >> np.uint64(27))) * _MIX2) & _MASK64
    return z ^ (z >> np.uint64(31))


@dataclass
class RngState:
    """Counter-based SplitMix64 stream: draw i is a pure function of (seed, i).

    Identical (seed, counter) always yields identical output, independent
    of platform and draw batching.
    """

    seed: int
    counter: int = 0

    def derived(self, tag: int) -> "RngState":
        """A decorrelated child stream, e.g. one per data-source purpose."""
        mixed = _splitmix64(np.array([tag], dtype=np.uint64))[0]
        base = _splitmix64(np.array([np.uint64(self.seed) ^ mixed], dtype=np.uint64))
        return RngState(seed=int(base[0]))

    def next_uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Draw uniformly from [low, high), row-major, advancing the counter."""
        if low >= high:
            raise InvalidRange(f"empty range [{low}, {high})")
        n = int(np.prod(shape, dtype=np.int64))
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            bits = _splitmix64((np.uint64(self.seed) * _MIX1 + idx) & _MASK64)
        u = (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = (low + (high - low) * u).astype(np.float32)
        return out.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via random sort keys."""
        keys = self.next_uniform((n,))
        return np.argsort(keys, kind="stable")


def seeded_uniform(shape, low: float, high: float, rng: RngState, dtype: Dtype = Dtype.F32) -> NdArray:
    """Deterministic uniform array in [low, high) drawn from rng."""
    return NdArray.from_values(rng.next_uniform(shape, low, high), dtype)
