"""Bit-packed integer weights and the kernels that run directly on them.

Layouts (all little-endian, lower flat index in the lower bits):

* int8: one code per byte.
* int4: two codes per byte, low nibble first.
* int2: four codes per byte, bits 0-1 first.

Symmetric codes are stored as two's complement inside their field;
asymmetric codes are unsigned. With an N:4 mask only the ``n`` kept codes of
each group of 4 are stored, in flat order, together with one 2-bit position
per kept code (packed like int2). In a checkpoint the positions are not
stored: they are implied by the bitmask entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidShape, InvalidState, Unsupported
from .quant import QuantizedTensor, QuantScheme, accumulate_grouped
from .sparse import SparsityMask, SparsityPattern
from .tensor_io import DType, QuantMeta, TensorPayload

SPARSE_GROUP = 4
INDEX_BITS = 2


def pack_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack unsigned fields of ``bits`` width, LSB-first, padding the last byte with zeros."""
    values = np.asarray(values, dtype=np.uint8).ravel()
    if bits == 8:
        return values.tobytes()
    per_byte = 8 // bits
    pad = (-values.size) % per_byte
    v = np.concatenate([values, np.zeros(pad, dtype=np.uint8)]).reshape(-1, per_byte)
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits).astype(np.uint8)
    return np.bitwise_or.reduce(v << shifts, axis=1).astype(np.uint8).tobytes()


def unpack_bits(data: bytes, bits: int, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    if bits == 8:
        out = raw
    else:
        per_byte = 8 // bits
        shifts = (np.arange(per_byte, dtype=np.uint8) * bits).astype(np.uint8)
        out = ((raw[:, None] >> shifts) & np.uint8((1 << bits) - 1)).ravel()
    if out.size < count:
        raise FormatError(f"packed stream holds {out.size} fields, need {count}")
    return out[:count].astype(np.uint8)


def encode_codes(codes: np.ndarray, scheme: QuantScheme) -> bytes:
    field_mask = (1 << scheme.bits) - 1
    return pack_bits(np.asarray(codes, dtype=np.int64) & field_mask, scheme.bits)


def decode_codes(data: bytes, scheme: QuantScheme, count: int) -> np.ndarray:
    raw = unpack_bits(data, scheme.bits, count).astype(np.int32)
    if scheme.symmetric:
        sign = 1 << (scheme.bits - 1)
        raw = np.where(raw >= sign, raw - (1 << scheme.bits), raw)
    return raw.astype(np.int32)


def pack_mask_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=bool).ravel(), bitorder="little").tobytes()


def unpack_mask_bits(data: bytes, shape) -> np.ndarray:
    n = math.prod(shape)
    flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if flat.size < n:
        raise FormatError("bitmask payload too short")
    return flat[:n].astype(bool).reshape(shape)


@dataclass(frozen=True)
class PackedWeight:
    scheme: QuantScheme
    shape: tuple[int, int]
    value_bytes: bytes
    scales: np.ndarray
    zero_points: np.ndarray
    pattern: SparsityPattern | None = None
    index_bytes: bytes = b""

    @property
    def numel(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def n_values(self) -> int:
        if self.pattern is None:
            return self.numel
        return self.numel // self.pattern.m * self.pattern.n

    @property
    def mask_nbytes(self) -> int:
        return math.ceil(self.numel / 8) if self.pattern is not None else 0

    @property
    def storage_nbytes(self) -> int:
        """Bytes this weight occupies as checkpoint payload: codes plus the bitmask."""
        return len(self.value_bytes) + self.mask_nbytes

    def kept_positions(self) -> np.ndarray:
        """Flat indices of stored codes, ascending; validates the index stream."""
        if self.pattern is None:
            return np.arange(self.numel)
        n = self.pattern.n
        idx = unpack_bits(self.index_bytes, INDEX_BITS, self.n_values).astype(np.int64).reshape(-1, n)
        if n > 1 and np.any(np.diff(idx, axis=1) <= 0):
            bad = int(np.nonzero(np.any(np.diff(idx, axis=1) <= 0, axis=1))[0][0])
            raise FormatError(f"corrupt sparse index in group {bad}: positions {idx[bad].tolist()}")
        base = np.arange(idx.shape[0], dtype=np.int64)[:, None] * SPARSE_GROUP
        return (base + idx).ravel()


def _zero_codes(scheme: QuantScheme, zero_points: np.ndarray, rows: int) -> np.ndarray:
    groups = np.arange(rows) // (rows // scheme.sub_channels)
    return np.asarray(zero_points, dtype=np.int32)[groups]


def pack(q: QuantizedTensor, mask: SparsityMask | None = None) -> PackedWeight:
    if mask is None:
        return PackedWeight(q.scheme, q.orig_shape, encode_codes(q.codes, q.scheme), q.scales.copy(), q.zero_points.copy())

    pattern = mask.pattern
    if pattern.m != SPARSE_GROUP:
        raise Unsupported(f"packed sparse storage supports m=4 only, got {pattern}")
    if mask.shape != q.orig_shape:
        raise InvalidShape(f"mask shape {mask.shape} != codes shape {q.orig_shape}")
    keep = mask.bits.reshape(-1, SPARSE_GROUP)
    if np.any(keep.sum(axis=1) != pattern.n):
        raise InvalidState(f"mask does not keep exactly {pattern.n} of every {SPARSE_GROUP}")
    zero = q.zero_code_matrix()
    if np.any((q.codes != zero) & ~mask.bits):
        raise InvalidState("non-zero code at a pruned position; prune before quantizing")
    flat_keep = mask.bits.ravel()
    values = q.codes.ravel()[flat_keep]
    positions = np.nonzero(keep)[1]  # row-major over groups, ascending within group
    return PackedWeight(
        q.scheme,
        q.orig_shape,
        encode_codes(values, q.scheme),
        q.scales.copy(),
        q.zero_points.copy(),
        pattern,
        pack_bits(positions, INDEX_BITS),
    )


def unpack(p: PackedWeight) -> tuple[QuantizedTensor, SparsityMask | None]:
    rows, cols = p.shape
    values = decode_codes(p.value_bytes, p.scheme, p.n_values)
    if p.pattern is None:
        return QuantizedTensor(values.reshape(rows, cols), p.scales, p.zero_points, p.scheme, p.shape), None
    pos = p.kept_positions()
    codes = _zero_codes(p.scheme, p.zero_points, rows).ravel().copy()
    codes[pos] = values
    bits = np.zeros(rows * cols, dtype=bool)
    bits[pos] = True
    q = QuantizedTensor(codes.reshape(rows, cols), p.scales, p.zero_points, p.scheme, p.shape)
    return q, SparsityMask(bits.reshape(rows, cols), p.pattern)


def packed_matmul(X, p: PackedWeight) -> np.ndarray:
    """``X @ W`` computed from the packed streams, one weight row at a time.

    Follows the same ascending accumulation order as
    :func:`nmq.quant.quantized_matmul_ref`, so the two agree bit for bit.
    """
    X = np.asarray(X, dtype=np.float32)
    rows, cols = p.shape
    if X.ndim != 2 or X.shape[1] != rows:
        raise InvalidShape(f"cannot multiply {X.shape} by {p.shape}")
    values = decode_codes(p.value_bytes, p.scheme, p.n_values).astype(np.float32)
    zero_rows = _zero_codes(p.scheme, p.zero_points, rows).astype(np.float32)

    if p.pattern is None:
        dense = values.reshape(rows, cols)
        return accumulate_grouped(X, lambda i: dense[i], p.scales, p.zero_points)

    pos = p.kept_positions()
    row_of = pos // cols
    starts = np.searchsorted(row_of, np.arange(rows + 1))

    def row_codes(i: int) -> np.ndarray:
        lo, hi = starts[i], starts[i + 1]
        row = zero_rows[i].copy()
        row[pos[lo:hi] - i * cols] = values[lo:hi]
        return row

    return accumulate_grouped(X, row_codes, p.scales, p.zero_points)


def mask_entry_name(name: str) -> str:
    return f"{name}.mask"


def to_payloads(name: str, p: PackedWeight) -> dict:
    """Checkpoint entries for ``p``: the code payload plus its bitmask when sparse."""
    zps = p.zero_points if not p.scheme.symmetric else np.zeros(0, dtype=np.int32)
    meta = QuantMeta(p.scheme, p.scales, zps)
    if p.pattern is None:
        return {name: TensorPayload(DType.for_bits(p.scheme.bits), p.shape, p.value_bytes, meta)}
    bits = np.zeros(p.numel, dtype=bool)
    bits[p.kept_positions()] = True
    mname = mask_entry_name(name)
    return {
        name: TensorPayload(DType.for_bits(p.scheme.bits), p.shape, p.value_bytes, meta, mname),
        mname: TensorPayload(DType.BITMASK, p.shape, pack_mask_bits(bits)),
    }


def from_payload(ckpt, name: str) -> PackedWeight:
    """Rebuild a :class:`PackedWeight` from a quantized checkpoint entry."""
    entry = ckpt[name]
    if entry.quant is None or len(entry.shape) != 2:
        raise FormatError(f"entry {name!r} is not a quantized matrix")
    scheme = entry.quant.scheme
    rows, cols = entry.shape
    scales = np.asarray(entry.quant.scales, dtype=np.float32).reshape(scheme.sub_channels, cols)
    if scheme.symmetric:
        zps = np.zeros_like(scales, dtype=np.int32)
    else:
        zps = np.asarray(entry.quant.zero_points, dtype=np.int32).reshape(scheme.sub_channels, cols)
    if entry.mask is None:
        return PackedWeight(scheme, (rows, cols), entry.data, scales, zps)
    bits = unpack_mask_bits(ckpt[entry.mask].data, entry.shape)
    groups = bits.reshape(-1, SPARSE_GROUP) if bits.size % SPARSE_GROUP == 0 else None
    if groups is None:
        raise FormatError(f"mask of {name!r} is not made of groups of {SPARSE_GROUP}")
    counts = groups.sum(axis=1)
    n = int(counts[0])
    if n < 1 or np.any(counts != n):
        raise FormatError(f"mask of {name!r} does not have a fixed N:4 structure")
    positions = np.nonzero(groups)[1]
    return PackedWeight(
        scheme, (rows, cols), entry.data, scales, zps, SparsityPattern(n, SPARSE_GROUP), pack_bits(positions, INDEX_BITS)
    )
