"""N:M structured sparsity: grouping, magnitude masks, pruning and mask schedules.

Groups are ``m`` consecutive elements of the row-major flattened weight.
Within a group the ``n`` largest magnitudes survive; equal magnitudes are
resolved in favour of the lower flat index, so every group keeps exactly
``n`` elements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidShape, InvalidState, InvalidValue


@dataclass(frozen=True)
class SparsityPattern:
    n: int
    m: int

    def __post_init__(self):
        if self.n < 1 or self.m < 2 or self.n > self.m:
            raise InvalidValue(f"invalid N:M pattern {self.n}:{self.m}")

    @property
    def density(self) -> float:
        return self.n / self.m

    @classmethod
    def parse(cls, text: str) -> "SparsityPattern | None":
        if text in ("none", "", None):
            return None
        try:
            n, m = (int(t) for t in text.split(":"))
        except ValueError:
            raise InvalidValue(f"sparsity must look like 'N:M', got {text!r}") from None
        return cls(n, m)

    def __str__(self) -> str:
        return f"{self.n}:{self.m}"


@dataclass
class SparsityMask:
    bits: np.ndarray  # bool, same shape as the weight
    pattern: SparsityPattern

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.bits.shape

    def as_float(self, dtype=np.float32) -> np.ndarray:
        return self.bits.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, SparsityMask):
            return NotImplemented
        return self.pattern == other.pattern and np.array_equal(self.bits, other.bits)


def reshape_groups(W, m: int) -> np.ndarray:
    """Row-major view of ``W`` as (K, m) groups of consecutive weights."""
    W = np.asarray(W)
    if m < 1 or W.size % m:
        raise InvalidShape(f"{W.size} elements cannot be split into groups of {m}")
    return W.reshape(-1, m)


def make_mask(W, pattern: SparsityPattern) -> SparsityMask:
    W = np.asarray(W, dtype=np.float32)
    V = reshape_groups(W, pattern.m)
    # stable sort on -|w| keeps the lower index first among ties
    order = np.argsort(-np.abs(V), axis=1, kind="stable")
    keep = np.zeros(V.shape, dtype=bool)
    np.put_along_axis(keep, order[:, : pattern.n], True, axis=1)
    return SparsityMask(keep.reshape(W.shape), pattern)


def prune(W, mask: SparsityMask) -> np.ndarray:
    W = np.asarray(W)
    if W.shape != mask.shape:
        raise InvalidShape(f"mask shape {mask.shape} != weight shape {W.shape}")
    # where() rather than multiply so pruned slots are +0.0, never -0.0
    return np.where(mask.bits, W, np.zeros((), dtype=W.dtype))


@dataclass
class PruneSchedule:
    """Mask update schedule; the mask may change only while ``current_step < total_steps``."""

    total_steps: int
    current_step: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise InvalidValue("total prune steps must be >= 1")

    @property
    def frozen(self) -> bool:
        return self.current_step >= self.total_steps


def schedule_step(sched: PruneSchedule, W, pattern: SparsityPattern, existing_mask: SparsityMask | None):
    """Return ``(mask, sched)``; recompute the mask until the schedule freezes."""
    if not sched.frozen:
        mask = make_mask(W, pattern)
        sched.current_step += 1
        return mask, sched
    if existing_mask is None:
        raise InvalidState("mask schedule is frozen but no mask was provided")
    return existing_mask, sched
