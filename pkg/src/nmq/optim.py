"""Adam with the inverse-square-root warmup schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TransformerSchedule:
    """``lr(t) = base * min(t**-0.5, t * warmup**-1.5)`` for 1-based step ``t``."""

    base: float = 1e-3
    warmup: int = 100

    def __call__(self, t: int) -> float:
        t = max(int(t), 1)
        return self.base * min(t**-0.5, t * self.warmup**-1.5)

    @property
    def peak(self) -> float:
        return self.base / math.sqrt(self.warmup)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: AdamState,
    schedule,
    masks: dict[str, np.ndarray] | None = None,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> float:
    """Update ``params`` in place and return the learning rate used.

    Entries of ``masks`` (boolean, keyed by parameter name) pin pruned
    weights: their update is forced to zero whatever the moments hold.
    """
    opt.step += 1
    t = opt.step
    lr = schedule(t)
    masks = masks or {}
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = opt.m.get(name)
        v = opt.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        opt.m[name], opt.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        update = (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        if name in masks:
            update = np.where(masks[name], update, np.zeros((), p.dtype))
        params[name] = p - update
    return lr
