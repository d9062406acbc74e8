"""Model size estimates and byte-accurate checkpoint accounting.

The estimate counts, relative to float32 storage of the same parameters,

* weight bits: ``bits / 32 * density`` (density ``n/m`` under N:M sparsity),
* mask bits: ``1 / 32`` under sparsity,
* extra scales: ``sub_channels / I`` when a channel is split into groups.

Single per-channel scales and container headers are ignored by the
estimate; :func:`measure_actual` counts every byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfig
from .packed import SPARSE_GROUP
from .quant import QuantScheme
from .sparse import SparsityPattern
from .tensor_io import HEADER_SIZE, Checkpoint, DType, packed_nbytes


def estimate_ratio(
    params: int,
    scheme: QuantScheme | None = None,
    pattern: SparsityPattern | None = None,
    channel_len: int | None = None,
) -> float:
    if params <= 0:
        raise InvalidConfig("params must be positive")
    bits = scheme.bits if scheme is not None else 32
    density = pattern.density if pattern is not None else 1.0
    ratio = bits / 32 * density
    if pattern is not None:
        ratio += 1 / 32
    if scheme is not None and scheme.sub_channels > 1:
        if not channel_len:
            raise InvalidConfig("channel length I is required to cost sub-channel scales")
        ratio += scheme.sub_channels / channel_len
    return ratio


@dataclass
class LayerSize:
    name: str
    params: int
    dtype: str
    payload_bytes: int = 0
    mask_bytes: int = 0
    scale_bytes: int = 0
    zero_point_bytes: int = 0
    metadata_bytes: int = 0
    estimate_ratio: float = 1.0
    compressed: bool = False

    @property
    def data_bytes(self) -> int:
        return self.payload_bytes + self.mask_bytes + self.scale_bytes + self.zero_point_bytes

    @property
    def actual_ratio(self) -> float:
        return self.data_bytes * 8 / (self.params * 32) if self.params else 0.0


@dataclass
class SizeReport:
    layers: list[LayerSize] = field(default_factory=list)
    header_bytes: int = HEADER_SIZE

    def _sum(self, attr, compressed_only=False):
        return sum(getattr(l, attr) for l in self.layers if l.compressed or not compressed_only)

    @property
    def params(self) -> int:
        return self._sum("params")

    @property
    def weight_bits(self) -> int:
        return 8 * self._sum("payload_bytes")

    @property
    def mask_bits(self) -> int:
        return 8 * self._sum("mask_bytes")

    @property
    def scale_bits(self) -> int:
        return 8 * (self._sum("scale_bytes") + self._sum("zero_point_bytes"))

    @property
    def data_bytes(self) -> int:
        return self._sum("data_bytes")

    @property
    def total_bytes(self) -> int:
        """Everything after the file header: data plus per-entry metadata."""
        return self.data_bytes + self._sum("metadata_bytes")

    @property
    def file_bytes(self) -> int:
        return self.header_bytes + self.total_bytes

    @property
    def ratio_vs_f32(self) -> float:
        return self.data_bytes * 8 / (self.params * 32) if self.params else 0.0

    @property
    def estimated_ratio(self) -> float:
        return _weighted_estimate(self.layers)

    def compressed_subtotal(self) -> tuple[int, float, float] | None:
        """``(params, estimate, actual)`` over compressed entries only."""
        rows = [l for l in self.layers if l.compressed]
        if not rows:
            return None
        params = sum(l.params for l in rows)
        actual = sum(l.data_bytes for l in rows) * 8 / (params * 32)
        return params, _weighted_estimate(rows), actual

    def to_dict(self) -> dict:
        out = {
            "params": self.params,
            "weight_bits": self.weight_bits,
            "mask_bits": self.mask_bits,
            "sub_channel_scale_bits": self.scale_bits,
            "data_bytes": self.data_bytes,
            "total_bytes": self.total_bytes,
            "file_bytes": self.file_bytes,
            "estimated_ratio": self.estimated_ratio,
            "actual_ratio": self.ratio_vs_f32,
            "delta": self.ratio_vs_f32 - self.estimated_ratio,
            "layers": [dict(asdict(l), data_bytes=l.data_bytes, actual_ratio=l.actual_ratio) for l in self.layers],
        }
        sub = self.compressed_subtotal()
        if sub is not None:
            out["compressed"] = {"params": sub[0], "estimated_ratio": sub[1], "actual_ratio": sub[2]}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        head = f"{'tensor':<28} {'dtype':<8} {'params':>10} {'bytes':>10} {'estimate':>9} {'actual':>9}"
        lines = [head, "-" * len(head)]
        for l in self.layers:
            lines.append(
                f"{l.name:<28} {l.dtype:<8} {l.params:>10} {l.data_bytes:>10} "
                f"{100 * l.estimate_ratio:>8.1f}% {100 * l.actual_ratio:>8.2f}%"
            )
        lines.append("-" * len(head))
        sub = self.compressed_subtotal()
        if sub is not None:
            params, est, act = sub
            lines.append(f"{'compressed tensors':<28} {'':<8} {params:>10} {'':>10} {100 * est:>8.1f}% {100 * act:>8.2f}%")
        lines.append(
            f"{'total':<28} {'':<8} {self.params:>10} {self.data_bytes:>10} "
            f"{100 * self.estimated_ratio:>8.1f}% {100 * self.ratio_vs_f32:>8.2f}%"
        )
        lines.append(f"file: {self.file_bytes} bytes ({self.header_bytes} header + {self.total_bytes} entries)")
        return "\n".join(lines)


def _weighted_estimate(layers) -> float:
    params = sum(l.params for l in layers)
    if not params:
        return 0.0
    return sum(l.estimate_ratio * l.params for l in layers) / params


def _entry_metadata_bytes(name: str, p) -> int:
    # name len + name + dtype + rank + dims + quant flag + mask name len + mask name + payload len
    size = 2 + len(name.encode()) + 1 + 1 + 4 * len(p.shape) + 1 + 2 + len((p.mask or "").encode()) + 8
    if p.quant is not None:
        size += 1 + 1 + 4 + 1 + 4 + 4  # scheme fields + the two counts
    return size


def measure_actual(ckpt: Checkpoint) -> SizeReport:
    """Tally every byte of ``ckpt``; bitmask entries are folded into the tensor that uses them."""
    report = SizeReport()
    mask_owner = {p.mask: name for name, p in ckpt if p.mask is not None}
    pending_meta = {}
    for name, p in ckpt:
        if p.dtype == DType.BITMASK and name in mask_owner:
            pending_meta[mask_owner[name]] = pending_meta.get(mask_owner[name], 0) + _entry_metadata_bytes(name, p)
    rows = {}
    for name, p in ckpt:
        meta = _entry_metadata_bytes(name, p)
        if p.dtype == DType.BITMASK:  # owned masks fold into their tensor, orphans are listed below
            continue
        layer = LayerSize(name, p.numel, p.dtype.name.lower(), payload_bytes=len(p.data), metadata_bytes=meta)
        scheme = None
        pattern = None
        if p.quant is not None:
            scheme = p.quant.scheme
            layer.scale_bytes = 4 * p.quant.scales.size
            layer.zero_point_bytes = 4 * p.quant.zero_points.size
        if p.mask is not None:
            mask = ckpt[p.mask]
            if mask_owner[p.mask] == name:  # a shared mask is billed once
                layer.mask_bytes = len(mask.data)
                layer.metadata_bytes += pending_meta.get(name, 0)
            kept = _kept_count(mask, p)
            pattern = SparsityPattern(max(1, round(SPARSE_GROUP * kept / p.numel)), SPARSE_GROUP)
        layer.compressed = scheme is not None or pattern is not None
        channel_len = p.shape[0] if len(p.shape) == 2 else None
        layer.estimate_ratio = estimate_ratio(p.numel, scheme, pattern, channel_len)
        rows[name] = layer
    report.layers = list(rows.values())
    # orphan bitmasks (not referenced by any tensor) still occupy the file
    for name, p in ckpt:
        if p.dtype == DType.BITMASK and name not in mask_owner:
            report.layers.append(
                LayerSize(name, 0, "bitmask", mask_bytes=len(p.data), metadata_bytes=_entry_metadata_bytes(name, p),
                          estimate_ratio=0.0)
            )
    return report


def _kept_count(mask, p) -> int:
    bits = np.unpackbits(np.frombuffer(mask.data, np.uint8), bitorder="little")[: mask.numel]
    return int(bits.sum())


def predicted_payload_bytes(shape, scheme: QuantScheme | None, pattern: SparsityPattern | None) -> int:
    """Exact code + mask bytes the container needs for one tensor."""
    numel = math.prod(shape)
    dtype = DType.for_bits(scheme.bits if scheme else 32)
    if pattern is None:
        return packed_nbytes(dtype, numel)
    kept = numel // pattern.m * pattern.n
    return packed_nbytes(dtype, kept) + packed_nbytes(DType.BITMASK, numel)
