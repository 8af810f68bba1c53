"""Q1.15 fixed-point primitives and the tensor containers built on them.

All inference state on the simulated device is a signed 16-bit word. A raw
word ``r`` with scale exponent ``s`` denotes the logical value
``r * 2**(s - 15)``; with the default scale of 0 this is plain Q1.15 in
[-1, 1). Multiplication takes the 32-bit product, right-shifts by 15 with
round-half-away-from-zero, and saturates. Addition saturates. Every kernel
in this package (software reference, loop-continuation runtime, simulated
accelerator) uses these exact primitives, which is what makes their outputs
bit-comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Q15_MIN = -32768
Q15_MAX = 32767
_HALF = 1 << 14  # rounding bias for the 15-bit shift


def sat16(x: int) -> int:
    """Clamp an integer to the signed 16-bit range."""
    if x > Q15_MAX:
        return Q15_MAX
    if x < Q15_MIN:
        return Q15_MIN
    return x


def qmul(a: int, b: int) -> int:
    """Saturating Q1.15 product of two raw 16-bit values.

    The 32-bit product is shifted right by 15 with round-half-away-from-zero,
    then saturated. 0.5 * 0.5 (raw 16384 * 16384) gives raw 8192.
    """
    p = a * b
    if p >= 0:
        r = (p + _HALF) >> 15
    else:
        r = -((-p + _HALF) >> 15)
    return sat16(r)


def qadd(a: int, b: int) -> int:
    """Saturating 16-bit addition."""
    return sat16(a + b)


def qshift(v: int, s: int) -> int:
    """Scale a raw value by 2**-s.

    Positive ``s`` is a right shift with the same round-half-away-from-zero
    rule as :func:`qmul`; negative ``s`` is a saturating left shift; 0 is the
    identity.
    """
    if s == 0:
        return v
    if s > 0:
        bias = 1 << (s - 1)
        if v >= 0:
            return (v + bias) >> s
        return -((-v + bias) >> s)
    return sat16(v << (-s))


def relu16(v: int) -> int:
    return v if v > 0 else 0


# Vectorized counterparts. These must agree bit-for-bit with the scalar
# forms; the test suite checks them against each other and against a wide
# integer oracle.

def qmul_arr(a, b) -> np.ndarray:
    p = np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)
    r = np.where(p >= 0, (p + _HALF) >> 15, -((-p + _HALF) >> 15))
    return np.clip(r, Q15_MIN, Q15_MAX).astype(np.int64)


def qadd_arr(a, b) -> np.ndarray:
    s = np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64)
    return np.clip(s, Q15_MIN, Q15_MAX).astype(np.int64)


def qshift_arr(v, s: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.int64)
    if s == 0:
        return v
    if s > 0:
        bias = 1 << (s - 1)
        r = np.where(v >= 0, (v + bias) >> s, -((-v + bias) >> s))
        return r
    return np.clip(v << (-s), Q15_MIN, Q15_MAX)


def quantize_value(x: float, scale: int = 0) -> int:
    """Round a real number to the nearest raw value at the given scale.

    Round-half-away-from-zero, saturating; the same rounding family as
    :func:`qmul` so oracles and kernels agree on boundary cases.
    """
    y = x * 2.0 ** (15 - scale)
    r = int(np.floor(abs(y) + 0.5))
    if y < 0:
        r = -r
    return sat16(r)


def dequantize_value(raw: int, scale: int = 0) -> float:
    return raw * 2.0 ** (scale - 15)


@dataclass(frozen=True)
class FixedTensor:
    """Immutable dense tensor of raw Q1.15 words plus a power-of-two scale.

    ``data`` is an int16 ndarray of at most 4 dimensions; the logical value
    of an element is ``raw * 2**(scale - 15)``.
    """

    data: np.ndarray
    scale: int = 0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.int16)
        if arr.ndim == 0 or arr.ndim > 4:
            raise ValueError(f"tensor rank must be 1..4, got {arr.ndim}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @classmethod
    def from_float(cls, values, scale: int = 0) -> "FixedTensor":
        x = np.asarray(values, dtype=np.float64) * 2.0 ** (15 - scale)
        r = np.sign(x) * np.floor(np.abs(x) + 0.5)
        r = np.clip(r, Q15_MIN, Q15_MAX)
        return cls(r.astype(np.int16), scale)

    def to_float(self) -> np.ndarray:
        return self.data.astype(np.float64) * 2.0 ** (self.scale - 15)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FixedTensor):
            return NotImplemented
        return (
            self.scale == other.scale
            and self.shape == other.shape
            and bool(np.array_equal(self.data, other.data))
        )


@dataclass(frozen=True)
class SparseMatrix:
    """Compressed sparse row matrix of raw Q1.15 values.

    Row offsets are non-decreasing, column indices strictly increase within
    each row, and ``offsets[-1]`` equals the stored non-zero count.
    """

    m: int
    n: int
    offsets: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    scale: int = 0

    def __post_init__(self):
        offs = np.asarray(self.offsets, dtype=np.int64).copy()
        cols = np.asarray(self.cols, dtype=np.int64).copy()
        vals = np.asarray(self.vals, dtype=np.int16).copy()
        if offs.shape != (self.m + 1,):
            raise ValueError("offsets must have m+1 entries")
        if offs[0] != 0 or np.any(np.diff(offs) < 0):
            raise ValueError("row offsets must start at 0 and be non-decreasing")
        if offs[-1] != len(cols) or len(cols) != len(vals):
            raise ValueError("offset/column/value lengths disagree")
        for r in range(self.m):
            row_cols = cols[offs[r]:offs[r + 1]]
            if row_cols.size and (
                np.any(np.diff(row_cols) <= 0)
                or row_cols[0] < 0
                or row_cols[-1] >= self.n
            ):
                raise ValueError(f"row {r} has unsorted or out-of-range columns")
        for a in (offs, cols, vals):
            a.flags.writeable = False
        object.__setattr__(self, "offsets", offs)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "vals", vals)

    @property
    def nnz(self) -> int:
        return int(self.offsets[-1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m, self.n)

    @classmethod
    def from_dense(cls, tensor: FixedTensor, threshold: float = 0.0) -> "SparseMatrix":
        """Build CSR from a 2-D tensor, dropping small entries.

        An entry is kept iff it is non-zero and its logical magnitude is at
        least ``threshold``. With threshold 0 only exact zeros are dropped.
        """
        if threshold < 0:
            raise ValueError("threshold must be non-negative")
        dense = np.asarray(tensor.data, dtype=np.int64)
        if dense.ndim != 2:
            raise ValueError("from_dense needs a 2-D tensor")
        thr_raw = threshold * 2.0 ** (15 - tensor.scale)
        keep = (dense != 0) & (np.abs(dense) >= thr_raw)
        m, n = dense.shape
        offsets = np.zeros(m + 1, dtype=np.int64)
        cols = []
        vals = []
        for r in range(m):
            idx = np.nonzero(keep[r])[0]
            cols.append(idx)
            vals.append(dense[r, idx])
            offsets[r + 1] = offsets[r] + len(idx)
        cols_arr = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
        vals_arr = np.concatenate(vals) if vals else np.zeros(0, dtype=np.int64)
        return cls(m, n, offsets, cols_arr, vals_arr.astype(np.int16), tensor.scale)

    def densify(self) -> FixedTensor:
        out = np.zeros((self.m, self.n), dtype=np.int16)
        for r in range(self.m):
            lo, hi = int(self.offsets[r]), int(self.offsets[r + 1])
            out[r, self.cols[lo:hi]] = self.vals[lo:hi]
        return FixedTensor(out, self.scale)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.scale == other.scale
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.vals, other.vals)
        )
