"""CTC loss (log-space forward-backward) and greedy decoding.

The last class index is the blank. Log-probabilities are accepted as free
inputs: the returned gradient is the derivative of the loss with respect to
each ``log_probs[t, k]`` entry, without assuming rows are normalized.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidShape

NEG_INF = -np.inf


def _extended(labels, blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_frames(labels) -> int:
    """Shortest input that can emit ``labels``: one frame per label plus a blank between repeats."""
    labels = list(labels)
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _shift(v: np.ndarray, k: int, fill=NEG_INF) -> np.ndarray:
    """``out[s] = v[s - k]``, padding with ``fill``."""
    out = np.full_like(v, fill)
    n = v.size
    if abs(k) >= n:
        return out
    if k >= 0:
        out[k:] = v[: n - k]
    else:
        out[: n + k] = v[-k:]
    return out


def _logaddexp3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_loss(log_probs, labels, blank: int | None = None) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of ``labels`` and its gradient w.r.t. ``log_probs``.

    Returns ``(inf, zeros)`` when ``labels`` cannot be aligned to the input
    length.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise InvalidShape(f"log_probs must be (T, C), got {lp.shape}")
    T, C = lp.shape
    blank = C - 1 if blank is None else blank
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if np.any((labels < 0) | (labels >= C) | (labels == blank)):
        raise InvalidShape("label index out of range or equal to blank")
    if T < min_frames(labels):
        return float("inf"), np.zeros_like(lp)

    ext = _extended(labels, blank)
    S = ext.size
    # s-2 skip allowed into a non-blank that differs from the label two back
    skip = np.zeros(S, dtype=bool)
    skip[3::2] = ext[3::2] != ext[1:-2:2]

    emit = lp[:, ext]  # (T, S)
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        one = _shift(prev, 1)
        two = np.where(skip, _shift(prev, 2), NEG_INF)
        alpha[t] = _logaddexp3(prev, one, two) + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = _shift(skip, -2, False)  # s -> s+2 allowed
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        one = _shift(nxt, -1)
        two = np.where(skip_from, _shift(nxt, -2), NEG_INF)
        beta[t] = _logaddexp3(nxt, one, two) + emit[t]

    log_p = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    if not np.isfinite(log_p):
        return float("inf"), np.zeros_like(lp)

    # both alpha and beta include the emission at t, so divide one out
    occ = alpha + beta - emit - log_p  # log posterior of being at s at time t
    grad = np.zeros_like(lp)
    for k in np.unique(ext):
        cols = ext == k
        grad[:, k] = -np.exp(np.logaddexp.reduce(occ[:, cols], axis=1))
    return float(-log_p), grad


def greedy_ctc_decode(log_probs, blank: int | None = None) -> list[int]:
    """Frame-wise argmax, collapse repeats, drop blanks."""
    lp = np.asarray(log_probs)
    blank = lp.shape[-1] - 1 if blank is None else blank
    best = lp.argmax(axis=-1)
    out = []
    prev = None
    for k in best.tolist():
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


def edit_distance(ref, hyp) -> int:
    ref, hyp = list(ref), list(hyp)
    row = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        prev_diag, row[0] = row[0], i
        for j, h in enumerate(hyp, 1):
            cur = min(row[j] + 1, row[j - 1] + 1, prev_diag + (r != h))
            prev_diag, row[j] = row[j], cur
    return row[-1]


def token_error_rate(refs, hyps) -> float:
    errors = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    total = sum(len(r) for r in refs)
    return errors / max(total, 1)
