"""Randomized self-check against the independent oracles.

Each case draws its inputs from ``np.random.default_rng([seed, index])`` so
any failure can be replayed alone. Three groups run per case:

* ``matmul``: packed kernel vs. the reference quantized matmul, bit for bit,
* ``roundtrip``: pack/unpack and checkpoint serialize/deserialize identity,
* ``ctc``: forward-backward loss vs. exhaustive alignment enumeration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ctc import ctc_loss, min_frames
from .errors import NMQError
from .oracles import ctc_brute_force
from .packed import pack, packed_matmul, to_payloads, unpack
from .quant import QuantScheme, quantized_matmul_ref, quantize_weight
from .sparse import SparsityPattern, make_mask, prune
from .tensor_io import Checkpoint, deserialize, serialize

GROUPS = ("matmul", "roundtrip", "ctc")
SCHEMES = (QuantScheme(8), QuantScheme(4), QuantScheme(2, symmetric=False))
PATTERNS = (None, SparsityPattern(2, 4), SparsityPattern(1, 4))
CTC_TOL = 1e-6

# fault hooks receive (group, artifact) and return a possibly corrupted artifact
FaultHook = Callable[[str, object], object]


@dataclass
class MatmulCase:
    X: np.ndarray
    W: np.ndarray
    scheme: QuantScheme
    pattern: SparsityPattern | None

    def describe(self) -> dict:
        return {
            "scheme": {"bits": self.scheme.bits, "symmetric": self.scheme.symmetric,
                       "sub_channels": self.scheme.sub_channels},
            "pattern": str(self.pattern) if self.pattern else "none",
            "X": self.X.tolist(),
            "W": self.W.tolist(),
        }


def random_matmul_case(rng: np.random.Generator, schemes=SCHEMES, patterns=PATTERNS) -> MatmulCase:
    scheme = schemes[rng.integers(len(schemes))]
    sub = int(rng.choice([1, 2, 4]))
    scheme = QuantScheme(scheme.bits, scheme.symmetric, sub)
    rows = sub * int(rng.integers(1, 5))
    cols = 4 * int(rng.integers(1, 4))
    W = (rng.standard_normal((rows, cols)) * rng.choice([0.01, 1.0, 100.0])).astype(np.float32)
    if rng.random() < 0.1:
        W[:, rng.integers(cols)] = 0.0
    X = rng.standard_normal((int(rng.integers(1, 5)), rows)).astype(np.float32)
    return MatmulCase(X, W, scheme, patterns[rng.integers(len(patterns))])


def compress_case(case: MatmulCase):
    mask = make_mask(case.W, case.pattern) if case.pattern is not None else None
    W = prune(case.W, mask) if mask is not None else case.W
    q = quantize_weight(W, case.scheme)
    return q, mask


@dataclass
class Failure:
    group: str
    index: int
    seed: int
    detail: dict

    def to_json(self) -> str:
        return json.dumps({"group": self.group, "case": self.index, "seed": self.seed, **self.detail})


@dataclass
class VerifyResult:
    cases: int
    failures: list[Failure] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _identity(group, artifact):
    return artifact


def check_matmul(case: MatmulCase, fault: FaultHook = _identity) -> dict | None:
    q, mask = compress_case(case)
    p = fault("matmul", pack(q, mask))
    got = packed_matmul(case.X, p)
    want = quantized_matmul_ref(case.X, q)
    if got.tobytes() == want.tobytes():
        return None
    bad = np.argwhere(got != want)[0].tolist()
    return dict(case.describe(), at=bad, packed=float(got[tuple(bad)]), reference=float(want[tuple(bad)]))


def check_roundtrip(case: MatmulCase, fault: FaultHook = _identity) -> dict | None:
    q, mask = compress_case(case)
    p = pack(q, mask)
    q2, mask2 = unpack(p)
    if q2 != q or (mask is not None and mask2 != mask):
        return dict(case.describe(), stage="pack/unpack")
    ckpt = Checkpoint()
    for name, entry in to_payloads("w", p).items():
        ckpt.add(name, entry)
    blob = serialize(ckpt)
    back = serialize(deserialize(fault("roundtrip", blob)))
    if back != blob:
        first = next(i for i, (a, b) in enumerate(zip(blob, back)) if a != b) if len(blob) == len(back) else None
        return dict(case.describe(), stage="serialize", first_diff=first)
    return None


def random_ctc_case(rng: np.random.Generator):
    vocab = int(rng.integers(1, 4))
    labels = rng.integers(0, vocab, int(rng.integers(0, 4))).tolist()
    T = int(rng.integers(max(1, min_frames(labels)), 6))
    logits = rng.standard_normal((T, vocab + 1)) * 2
    log_probs = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    return log_probs, labels


def check_ctc(log_probs, labels, fault: FaultHook = _identity) -> dict | None:
    loss, _ = ctc_loss(fault("ctc", log_probs), labels)
    want = ctc_brute_force(log_probs, labels)
    if abs(loss - want) <= CTC_TOL * max(1.0, abs(want)):
        return None
    return {"log_probs": np.asarray(log_probs).tolist(), "labels": labels, "forward_backward": loss, "enumeration": want}


def run_verify(cases: int = 200, seed: int = 0, fault: FaultHook | None = None, stop_early: bool = True) -> VerifyResult:
    fault = fault or _identity
    result = VerifyResult(cases)
    for i in range(cases):
        rng = np.random.default_rng([seed, i])
        mcase = random_matmul_case(rng)
        ctc_case = random_ctc_case(rng)
        checks = {
            "matmul": lambda: check_matmul(mcase, fault),
            "roundtrip": lambda: check_roundtrip(mcase, fault),
            "ctc": lambda: check_ctc(*ctc_case, fault),
        }
        for group in GROUPS:
            try:
                detail = checks[group]()
            except NMQError as exc:
                detail = {"error": f"{type(exc).__name__}: {exc}"}
            if detail is not None:
                result.failures.append(Failure(group, i, seed, detail))
                if stop_early:
                    return result
    return result


def bit_flip_fault(target: str, bit: int = 0) -> FaultHook:
    """Corrupt one bit of the artifact of group ``target`` (fault-injection harness)."""

    def hook(group, artifact):
        if group != target:
            return artifact
        if group == "matmul":
            data = bytearray(artifact.value_bytes)
            data[0] ^= 1 << bit
            return type(artifact)(**{**artifact.__dict__, "value_bytes": bytes(data)})
        if group == "roundtrip":
            data = bytearray(artifact)
            data[-1] ^= 1 << bit
            return bytes(data)
        out = np.array(artifact, dtype=np.float64)
        out.view(np.uint64).flat[0] ^= np.uint64(1 << (52 - 1 - bit))
        return out

    return hook
