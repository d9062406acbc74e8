"""Per-channel and sub-channel weight quantization.

A weight ``W`` of shape (I, J) has one channel per column. Each channel is
split into ``sub_channels`` contiguous row groups, and every (group, channel)
pair owns a scale and, for asymmetric schemes, a zero point::

    code = clamp(round(w / scale) + zero_point, qmin, qmax)
    w'   = scale * (code - zero_point)

Rounding is half away from zero. Quotients are formed in float64 from the
float32 operands; scales are float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import InvalidShape, InvalidValue


# subnormal peaks can underflow peak/qmax to zero; the smallest positive float32 keeps scales valid
TINY = np.nextafter(np.float32(0), np.float32(1))


class Rounding(IntEnum):
    HALF_AWAY_FROM_ZERO = 0


@dataclass(frozen=True)
class QuantScheme:
    bits: int = 8
    symmetric: bool = True
    sub_channels: int = 1
    rounding: Rounding = Rounding.HALF_AWAY_FROM_ZERO

    def __post_init__(self):
        if self.bits not in (2, 4, 8):
            raise InvalidValue(f"bits must be 2, 4 or 8, got {self.bits}")
        if self.sub_channels < 1:
            raise InvalidValue(f"sub_channels must be >= 1, got {self.sub_channels}")
        object.__setattr__(self, "rounding", Rounding(self.rounding))

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.symmetric else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2**self.bits - 1

    @property
    def underutilizes_buckets(self) -> bool:
        """Symmetric int2 can only emit {-1, 0, 1}."""
        return self.symmetric and self.bits == 2


def round_half_away(x) -> np.ndarray:
    """Round to nearest integer, ties away from zero, without the ``x + 0.5`` error."""
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(x)
    floor = np.floor(mag)
    out = floor + (mag - floor >= 0.5)
    return np.copysign(out, x).astype(np.int64)


def _check_finite(values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise InvalidValue("input contains NaN or Inf")


def _check_bits(bits: int) -> None:
    if bits not in (2, 4, 8):
        raise InvalidValue(f"bits must be 2, 4 or 8, got {bits}")


def compute_scale_symmetric(column, bits: int) -> np.float32:
    """max(|column|) / (2**(bits-1) - 1); 1.0 for an all-zero column."""
    _check_bits(bits)
    column = np.asarray(column, dtype=np.float32)
    _check_finite(column)
    peak = np.max(np.abs(column)) if column.size else np.float32(0)
    if peak == 0:
        return np.float32(1.0)
    return max(np.float32(peak) / np.float32(2 ** (bits - 1) - 1), TINY)


def quantize_column(column, scale, scheme: QuantScheme, zero_point: int = 0) -> np.ndarray:
    scale = np.float32(scale)
    if not scale > 0:
        raise InvalidValue(f"scale must be positive, got {scale}")
    column = np.asarray(column, dtype=np.float32)
    q = round_half_away(column.astype(np.float64) / np.float64(scale)) + zero_point
    return np.clip(q, scheme.qmin, scheme.qmax).astype(np.int32)


def compute_asymmetric_params(group, bits: int, force_zero_representable: bool = True):
    """Return ``(scale, zero_point)`` spanning [min, max] of ``group`` with ``2**bits`` levels."""
    _check_bits(bits)
    group = np.asarray(group, dtype=np.float32)
    _check_finite(group)
    levels = 2**bits - 1
    lo, hi = np.float32(group.min()), np.float32(group.max())
    if hi == lo:
        scale = np.float32(1.0)
    else:
        scale = np.float32(hi - lo) / np.float32(levels)
        if not scale > 0:  # range below float32 resolution
            scale = np.float32(1.0)
    zp = int(round_half_away(-np.float64(lo) / np.float64(scale)))
    zp = min(max(zp, 0), levels)
    if force_zero_representable:
        # dequantize(zp) == scale * 0 == 0 exactly; only the range needs checking
        assert 0 <= zp <= levels
    return scale, zp


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # int32 (I, J)
    scales: np.ndarray  # float32 (sub_channels, J)
    zero_points: np.ndarray  # int32 (sub_channels, J)
    scheme: QuantScheme
    orig_shape: tuple[int, int]

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int32)
        self.scales = np.asarray(self.scales, dtype=np.float32)
        self.zero_points = np.asarray(self.zero_points, dtype=np.int32)
        self.orig_shape = tuple(self.orig_shape)
        if self.codes.shape != self.orig_shape or len(self.orig_shape) != 2:
            raise InvalidShape(f"codes shape {self.codes.shape} != {self.orig_shape}")
        rows, cols = self.orig_shape
        expect = (self.scheme.sub_channels, cols)
        if self.scales.shape != expect or self.zero_points.shape != expect:
            raise InvalidShape(f"scales/zero_points must have shape {expect}")
        if rows % self.scheme.sub_channels:
            raise InvalidShape(f"{rows} rows not divisible into {self.scheme.sub_channels} groups")
        if self.codes.size and (self.codes.min() < self.scheme.qmin or self.codes.max() > self.scheme.qmax):
            raise InvalidValue("code outside the scheme's integer range")
        if not np.all(self.scales > 0):
            raise InvalidValue("scales must be strictly positive")
        if self.scheme.symmetric and np.any(self.zero_points != 0):
            raise InvalidValue("symmetric scheme with non-zero zero point")

    @property
    def group_size(self) -> int:
        return self.orig_shape[0] // self.scheme.sub_channels

    def row_groups(self) -> np.ndarray:
        """Group index g(i) of every row."""
        return np.arange(self.orig_shape[0]) // self.group_size

    def zero_code_matrix(self) -> np.ndarray:
        """Code that dequantizes to exactly 0.0 at each position."""
        return self.zero_points[self.row_groups()]

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.scheme == other.scheme
            and self.orig_shape == other.orig_shape
            and np.array_equal(self.codes, other.codes)
            and self.scales.tobytes() == other.scales.tobytes()
            and np.array_equal(self.zero_points, other.zero_points)
        )


def quantize_weight(W, scheme: QuantScheme) -> QuantizedTensor:
    W = np.asarray(W, dtype=np.float32)
    if W.ndim != 2:
        raise InvalidShape(f"weight must be a matrix, got shape {W.shape}")
    _check_finite(W)
    rows, cols = W.shape
    G = scheme.sub_channels
    if rows % G:
        raise InvalidShape(f"{rows} rows not divisible into {G} sub-channels")
    grouped = W.reshape(G, rows // G, cols)

    if scheme.symmetric:
        peak = np.abs(grouped).max(axis=1)
        scales = np.where(peak == 0, np.float32(1.0), np.maximum(peak / np.float32(scheme.qmax), TINY))
        scales = scales.astype(np.float32)
        zps = np.zeros((G, cols), dtype=np.int32)
    else:
        levels = np.float32(scheme.qmax)
        lo = grouped.min(axis=1)
        hi = grouped.max(axis=1)
        scales = ((hi - lo) / levels).astype(np.float32)
        scales = np.where((hi == lo) | ~(scales > 0), np.float32(1.0), scales).astype(np.float32)
        zps = round_half_away(-lo.astype(np.float64) / scales.astype(np.float64))
        zps = np.clip(zps, 0, scheme.qmax).astype(np.int32)

    ratio = grouped.astype(np.float64) / scales[:, None, :].astype(np.float64)
    codes = np.clip(round_half_away(ratio) + zps[:, None, :], scheme.qmin, scheme.qmax)
    return QuantizedTensor(codes.reshape(rows, cols), scales, zps, scheme, (rows, cols))


def dequantize(q: QuantizedTensor) -> np.ndarray:
    g = q.row_groups()
    centered = (q.codes - q.zero_points[g]).astype(np.float32)
    return (q.scales[g] * centered).astype(np.float32)


def quantized_matmul_ref(X, q: QuantizedTensor) -> np.ndarray:
    """Weight-only quantized matmul, accumulated in float32 in ascending row order.

    For each group ``g``: ``Y += scale_g * (sum_i X_i * code_i - zp_g * sum_i X_i)``.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[1] != q.orig_shape[0]:
        raise InvalidShape(f"cannot multiply {X.shape} by {q.orig_shape}")
    codes = q.codes.astype(np.float32)
    return accumulate_grouped(X, lambda i: codes[i], q.scales, q.zero_points)


def accumulate_grouped(X: np.ndarray, row_codes, scales: np.ndarray, zero_points: np.ndarray) -> np.ndarray:
    """The fixed summation order every quantized matmul kernel follows.

    ``row_codes(i)`` returns the float32 codes of weight row ``i``. Rows are
    visited in ascending order; groups are combined in ascending order.
    """
    B, rows = X.shape
    groups, cols = scales.shape
    size = rows // groups
    zps = zero_points.astype(np.float32)
    Y = np.zeros((B, cols), dtype=np.float32)
    for g in range(groups):
        dot = np.zeros((B, cols), dtype=np.float32)
        xsum = np.zeros((B, 1), dtype=np.float32)
        for i in range(g * size, (g + 1) * size):
            xi = X[:, i : i + 1]
            dot += xi * row_codes(i)
            xsum += xi
        Y += scales[g] * (dot - zps[g] * xsum)
    return Y
