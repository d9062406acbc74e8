"""Dense tensors, deterministic initialization and the ``NMQC`` checkpoint container.

Tensors are plain row-major ``numpy.float32`` arrays. Matrices are laid out
as (rows=I, cols=J), i.e. input dimension first, so ``Y = X @ W``.

Seeded initialization uses a fixed generator so that values reproduce on any
platform:

* the seed is expanded with one round of SplitMix64::

      z = (seed + 0x9E3779B97F4A7C15) mod 2**64
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
      z = (z ^ (z >> 27)) * 0x94D049BB133111EB
      state = z ^ (z >> 31)        # replaced by 1 if it is 0

* each draw advances an xorshift64* generator::

      x ^= x >> 12; x ^= x << 25; x ^= x >> 27
      out = x * 0x2545F4914F6CDD1D  (mod 2**64)

* ``u = (out >> 40) / 2**24`` is a float in [0, 1) with 24 random bits and
  the element is ``float32(lo + (hi - lo) * u)`` evaluated in double.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError, InvalidShape, InvalidValue, IoError
from .quant import QuantScheme, Rounding

MAGIC = b"NMQC"
VERSION = 1
HEADER_SIZE = 10

_MASK64 = (1 << 64) - 1


class DType(IntEnum):
    F32 = 0
    I8 = 1
    I4P = 2
    I2P = 3
    BITMASK = 4

    @property
    def bits(self) -> int:
        return {DType.F32: 32, DType.I8: 8, DType.I4P: 4, DType.I2P: 2, DType.BITMASK: 1}[self]

    @classmethod
    def for_bits(cls, bits: int) -> "DType":
        try:
            return {32: cls.F32, 8: cls.I8, 4: cls.I4P, 2: cls.I2P}[bits]
        except KeyError:
            raise InvalidValue(f"no storage dtype for {bits}-bit values") from None


def packed_nbytes(dtype: DType, n_elements: int) -> int:
    return math.ceil(n_elements * dtype.bits / 8)


# ---------------------------------------------------------------------------
# deterministic generator


def _splitmix64(seed: int) -> int:
    z = (seed + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* stream seeded through SplitMix64."""

    def __init__(self, seed: int):
        self.state = _splitmix64(int(seed) & _MASK64) or 1

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK64

    def uniform(self, n: int) -> np.ndarray:
        """``n`` floats in [0, 1), each carrying 24 random bits."""
        draws = [self.next_u64() >> 40 for _ in range(n)]
        return np.asarray(draws, dtype=np.float64) * (1.0 / (1 << 24))


@dataclass(frozen=True)
class SeededUniform:
    seed: int
    lo: float = -1.0
    hi: float = 1.0


def tensor_new(shape: Sequence[int], fill="zeros") -> np.ndarray:
    """Create a float32 tensor filled with zeros, ones or seeded uniform noise."""
    shape = tuple(int(d) for d in shape)
    if not shape or any(d < 1 for d in shape):
        raise InvalidShape(f"shape must be non-empty with positive dims, got {shape}")
    if isinstance(fill, SeededUniform):
        n = math.prod(shape)
        u = XorShift64Star(fill.seed).uniform(n)
        vals = fill.lo + (fill.hi - fill.lo) * u
        return vals.astype(np.float32).reshape(shape)
    if fill == "zeros":
        return np.zeros(shape, dtype=np.float32)
    if fill == "ones":
        return np.ones(shape, dtype=np.float32)
    raise InvalidValue(f"unknown fill {fill!r}")


def as_tensor(values) -> np.ndarray:
    """Validate and convert to a finite float32 array."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim == 0 or arr.size == 0:
        raise InvalidShape("tensor must have at least one element and one dimension")
    if not np.all(np.isfinite(arr)):
        raise InvalidValue("tensor contains NaN or Inf")
    return arr


# ---------------------------------------------------------------------------
# checkpoint container


@dataclass
class QuantMeta:
    scheme: QuantScheme
    scales: np.ndarray  # float32, (sub_channels, J)
    zero_points: np.ndarray  # int32, same shape as scales or empty when symmetric

    def __eq__(self, other):
        if not isinstance(other, QuantMeta):
            return NotImplemented
        return (
            self.scheme == other.scheme
            and _bits_equal(self.scales, other.scales, np.float32)
            and _bits_equal(self.zero_points, other.zero_points, np.int32)
        )


def _bits_equal(a, b, dtype) -> bool:
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass
class TensorPayload:
    """One named entry of a checkpoint.

    When ``mask`` names a bitmask entry the payload holds only the kept
    elements (in flat row-major order); otherwise it holds all elements.
    """

    dtype: DType
    shape: tuple[int, ...]
    data: bytes
    quant: QuantMeta | None = None
    mask: str | None = None

    def __post_init__(self):
        self.dtype = DType(self.dtype)
        self.shape = tuple(int(d) for d in self.shape)
        self.data = bytes(self.data)
        if any(d < 1 for d in self.shape):
            raise InvalidShape(f"bad shape {self.shape}")
        full = packed_nbytes(self.dtype, self.numel)
        if self.mask is None and len(self.data) != full:
            raise FormatError(
                f"{self.dtype.name} payload of shape {self.shape} needs {full} bytes, got {len(self.data)}"
            )
        if self.mask is not None and len(self.data) > full:
            raise FormatError("sparse payload larger than its dense equivalent")

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @classmethod
    def from_array(cls, arr) -> "TensorPayload":
        arr = np.asarray(arr, dtype="<f4")
        return cls(DType.F32, arr.shape, arr.tobytes())

    def to_array(self) -> np.ndarray:
        if self.dtype != DType.F32 or self.mask is not None:
            raise InvalidValue(f"entry is not a dense f32 tensor ({self.dtype.name})")
        return np.frombuffer(self.data, dtype="<f4").astype(np.float32).reshape(self.shape)


@dataclass
class Checkpoint:
    entries: dict[str, TensorPayload] = field(default_factory=dict)
    version: int = VERSION

    def __iter__(self) -> Iterator[tuple[str, TensorPayload]]:
        return iter(self.entries.items())

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> TensorPayload:
        return self.entries[name]

    def add(self, name: str, payload: TensorPayload) -> None:
        if name in self.entries:
            raise InvalidValue(f"duplicate entry name {name!r}")
        self.entries[name] = payload

    def validate(self) -> None:
        """Cross-entry checks: mask references resolve and sparse payload sizes agree."""
        for name, p in self.entries.items():
            if p.mask is None:
                continue
            ref = self.entries.get(p.mask)
            if ref is None or ref.dtype != DType.BITMASK or ref.shape != p.shape:
                raise FormatError(f"entry {name!r} references missing or mismatched mask {p.mask!r}")
            kept = int(np.unpackbits(np.frombuffer(ref.data, np.uint8), bitorder="little")[: ref.numel].sum())
            if len(p.data) != packed_nbytes(p.dtype, kept):
                raise FormatError(f"entry {name!r}: payload does not match {kept} kept elements")


def serialize(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", ckpt.version, len(ckpt.entries)))
    for name, p in ckpt.entries.items():
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", int(p.dtype), len(p.shape)))
        buf.write(struct.pack(f"<{len(p.shape)}I", *p.shape))
        if p.quant is None:
            buf.write(b"\x00")
        else:
            s = p.quant.scheme
            buf.write(struct.pack("<BBBIB", 1, s.bits, int(s.symmetric), s.sub_channels, int(s.rounding)))
            scales = np.ascontiguousarray(p.quant.scales, dtype="<f4").ravel()
            zps = np.ascontiguousarray(p.quant.zero_points, dtype="<i4").ravel()
            buf.write(struct.pack("<I", scales.size))
            buf.write(scales.tobytes())
            buf.write(struct.pack("<I", zps.size))
            buf.write(zps.tobytes())
        raw_mask = (p.mask or "").encode("utf-8")
        buf.write(struct.pack("<H", len(raw_mask)))
        buf.write(raw_mask)
        buf.write(struct.pack("<Q", len(p.data)))
        buf.write(p.data)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic, not an NMQC checkpoint")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    ckpt = Checkpoint(version=version)
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not UTF-8") from exc
        code, rank = r.unpack("<BB")
        try:
            dtype = DType(code)
        except ValueError:
            raise FormatError(f"unknown dtype code {code}") from None
        shape = r.unpack(f"<{rank}I")
        (flag,) = r.unpack("<B")
        quant = None
        if flag == 1:
            bits, sym, sub, rounding = r.unpack("<BBIB")
            try:
                scheme = QuantScheme(bits=bits, symmetric=bool(sym), sub_channels=sub, rounding=Rounding(rounding))
            except ValueError as exc:
                raise FormatError(f"bad quantization scheme: {exc}") from exc
            (n_scales,) = r.unpack("<I")
            scales = np.frombuffer(r.take(4 * n_scales), dtype="<f4").astype(np.float32)
            (n_zp,) = r.unpack("<I")
            zps = np.frombuffer(r.take(4 * n_zp), dtype="<i4").astype(np.int32)
            if len(shape) >= 1 and n_scales == sub * shape[-1]:
                scales = scales.reshape(sub, shape[-1])
                if n_zp == n_scales:
                    zps = zps.reshape(sub, shape[-1])
            quant = QuantMeta(scheme, scales, zps)
        elif flag != 0:
            raise FormatError(f"bad quant flag {flag}")
        (mask_len,) = r.unpack("<H")
        mask = r.take(mask_len).decode("utf-8") if mask_len else None
        (nbytes,) = r.unpack("<Q")
        payload = r.take(nbytes)
        try:
            entry = TensorPayload(dtype, shape, payload, quant, mask)
        except InvalidShape as exc:
            raise FormatError(str(exc)) from exc
        if name in ckpt.entries:
            raise FormatError(f"duplicate entry name {name!r}")
        ckpt.entries[name] = entry
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last entry")
    ckpt.validate()
    return ckpt


def checkpoint_save(ckpt: Checkpoint, path) -> None:
    data = serialize(ckpt)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def checkpoint_load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return deserialize(data)
