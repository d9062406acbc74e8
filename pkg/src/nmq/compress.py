"""Turning float weights into native checkpoint entries and running them back.

Compressed matrices are written in their storage format (packed codes plus
a bitmask when sparse); :class:`NativeModel` runs inference directly on those
entries with :func:`nmq.packed.packed_matmul`, never materializing a float
copy of a quantized weight.
"""

from __future__ import annotations

import fnmatch
import re

import numpy as np

from .ctc import greedy_ctc_decode
from .errors import FormatError, InvalidShape, InvalidValue
from .packed import (
    from_payload,
    mask_entry_name,
    pack,
    pack_mask_bits,
    packed_matmul,
    to_payloads,
    unpack,
    unpack_mask_bits,
)
from .quant import QuantScheme, dequantize, quantize_weight
from .sparse import SparsityMask, SparsityPattern, make_mask, prune
from .tensor_io import Checkpoint, DType, TensorPayload


def compress_weight(
    name: str,
    W,
    scheme: QuantScheme | None,
    pattern: SparsityPattern | None,
    mask: SparsityMask | None = None,
) -> dict[str, TensorPayload]:
    """Prune (one-shot magnitude mask unless ``mask`` is given), quantize and pack ``W``."""
    W = np.asarray(W, dtype=np.float32)
    if pattern is not None and mask is None:
        mask = make_mask(W, pattern)
    W_pruned = prune(W, mask) if mask is not None else W
    if scheme is not None:
        return to_payloads(name, pack(quantize_weight(W_pruned, scheme), mask))
    if mask is None:
        return {name: TensorPayload.from_array(W)}
    kept = W_pruned.ravel()[mask.bits.ravel()].astype("<f4")
    mname = mask_entry_name(name)
    return {
        name: TensorPayload(DType.F32, W.shape, kept.tobytes(), mask=mname),
        mname: TensorPayload(DType.BITMASK, W.shape, pack_mask_bits(mask.bits)),
    }


def is_compressed(p: TensorPayload) -> bool:
    return p.dtype != DType.F32 or p.quant is not None or p.mask is not None


def compress_checkpoint(
    ckpt: Checkpoint,
    scheme: QuantScheme | None,
    pattern: SparsityPattern | None,
    include: str = "*linear*",
) -> Checkpoint:
    """Post-training compression of every matrix whose name matches ``include``."""
    for name, p in ckpt:
        if is_compressed(p):
            raise InvalidValue(f"entry {name!r} is already compressed ({p.dtype.name.lower()})")
    out = Checkpoint(version=ckpt.version)
    for name, p in ckpt:
        if len(p.shape) == 2 and fnmatch.fnmatchcase(name, include) and (scheme or pattern):
            for entry_name, entry in compress_weight(name, p.to_array(), scheme, pattern).items():
                out.add(entry_name, entry)
        else:
            out.add(name, p)
    return out


def dense_weight(ckpt: Checkpoint, name: str) -> np.ndarray:
    """Float view of any stored matrix (dequantized when quantized)."""
    p = ckpt[name]
    if p.quant is not None:
        return dequantize(unpack(from_payload(ckpt, name))[0])
    if p.dtype != DType.F32:
        raise FormatError(f"entry {name!r} has dtype {p.dtype.name} without quantization metadata")
    if p.mask is None:
        return p.to_array()
    bits = unpack_mask_bits(ckpt[p.mask].data, p.shape)
    out = np.zeros(p.shape, dtype=np.float32)
    out[bits] = np.frombuffer(p.data, dtype="<f4")
    return out


_LAYER = re.compile(r"^(layer(\d+)\.linear|softmax)\.weight$")


class NativeModel:
    """Inference straight from a checkpoint written by ``nmq train`` or ``nmq compress``."""

    def __init__(self, ckpt: Checkpoint):
        self.ckpt = ckpt
        hidden = sorted(
            (int(m.group(2)), m.group(1)) for m in map(_LAYER.match, ckpt.entries) if m and m.group(2) is not None
        )
        if "softmax.weight" not in ckpt.entries:
            raise FormatError("checkpoint has no softmax.weight entry")
        self.prefixes = [p for _, p in hidden] + ["softmax"]
        self._ops = [self._linear_op(f"{p}.weight") for p in self.prefixes]
        self.biases = [ckpt[f"{p}.bias"].to_array() for p in self.prefixes]

    def _linear_op(self, name):
        p = self.ckpt[name]
        if p.quant is not None:
            packed = from_payload(self.ckpt, name)
            return lambda X: packed_matmul(X, packed)
        W = dense_weight(self.ckpt, name)
        return lambda X: X @ W

    @property
    def input_dim(self) -> int:
        return self.ckpt[f"{self.prefixes[0]}.weight"].shape[0]

    def log_probs(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 3 or X.shape[2] != self.input_dim:
            raise InvalidShape(f"expected (N, T, {self.input_dim}) frames, got {X.shape}")
        N, T, F = X.shape
        h = X.reshape(N * T, F)
        for k, (op, b) in enumerate(zip(self._ops, self.biases)):
            h = op(h) + b
            if k < len(self._ops) - 1:
                h = np.where(h > 0, h, 0).astype(h.dtype)
        shifted = h - h.max(axis=-1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return out.reshape(N, T, -1)

    def decode(self, X) -> list[list[int]]:
        return [greedy_ctc_decode(seq) for seq in self.log_probs(X)]
