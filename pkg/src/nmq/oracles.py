"""Independent reference computations used by ``nmq verify`` and the test suite."""

from __future__ import annotations

import itertools

import numpy as np


def collapse(path, blank: int) -> tuple[int, ...]:
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def ctc_brute_force(log_probs, labels, blank: int | None = None) -> float:
    """-log of the summed probability of every frame path that collapses to ``labels``."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, C = lp.shape
    blank = C - 1 if blank is None else blank
    target = tuple(int(k) for k in labels)
    terms = [
        sum(lp[t, k] for t, k in enumerate(path))
        for path in itertools.product(range(C), repeat=T)
        if collapse(path, blank) == target
    ]
    if not terms:
        return float("inf")
    return float(-np.logaddexp.reduce(terms))


def central_difference(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, in float64."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        up = f(x)
        x[idx] = orig - eps
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def dense_matmul(X, W) -> np.ndarray:
    """Plain float64 product, the reference for factorization checks."""
    return np.asarray(X, dtype=np.float64) @ np.asarray(W, dtype=np.float64)
