"""Joint prune-then-quantize training of a small CTC model.

Every training step:

1. refresh the N:M masks while the prune schedule is open (frozen afterwards),
2. prune each compressed weight, quantize it, and run the native quantized matmul,
3. compute CTC loss over the batch,
4. backpropagate with the straight-through estimator (masked weight gradients),
5. take an Adam step that leaves pruned weights untouched.
"""

from __future__ import annotations

import copy
import fnmatch
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph
from .compress import compress_weight, is_compressed
from .ctc import ctc_loss, greedy_ctc_decode, token_error_rate
from .errors import DivergenceError, InvalidConfig, InvalidShape, InvalidState
from .optim import AdamState, TransformerSchedule, adam_step
from .quant import QuantScheme
from .sparse import PruneSchedule, SparsityMask, SparsityPattern, prune, schedule_step
from .tensor_io import Checkpoint, SeededUniform, TensorPayload, tensor_new


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    vocab_size: int
    hidden: tuple[int, ...] = (64, 64)

    @property
    def num_classes(self) -> int:
        return self.vocab_size + 1  # last class is the CTC blank

    def layers(self) -> list[tuple[str, int, int]]:
        """``(prefix, fan_in, fan_out)`` for every layer, input to output."""
        dims = (self.input_dim,) + tuple(self.hidden)
        out = [(f"layer{k}.linear", dims[k], dims[k + 1]) for k in range(len(self.hidden))]
        out.append(("softmax", dims[-1], self.num_classes))
        return out


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    params = {}
    for k, (prefix, fan_in, fan_out) in enumerate(spec.layers()):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}.weight"] = tensor_new((fan_in, fan_out), SeededUniform(seed * 1009 + k, -bound, bound))
        params[f"{prefix}.bias"] = tensor_new((fan_out,), "zeros")
    return params


@dataclass(frozen=True)
class CompressionConfig:
    scheme: QuantScheme | None = None
    pattern: SparsityPattern | None = None
    prune_steps: int = 1
    layer_filter: str = "*linear*"

    def __post_init__(self):
        if self.prune_steps < 1:
            raise InvalidConfig("prune_steps must be >= 1")

    @property
    def active(self) -> bool:
        return self.scheme is not None or self.pattern is not None

    def compresses(self, weight_name: str) -> bool:
        return self.active and weight_name.endswith(".weight") and fnmatch.fnmatchcase(weight_name, self.layer_filter)


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    step: int = 0
    schedules: dict[str, PruneSchedule] = field(default_factory=dict)
    masks: dict[str, SparsityMask] = field(default_factory=dict)
    opt: AdamState = field(default_factory=AdamState)
    version: int = 0

    @property
    def masks_frozen(self) -> bool:
        return all(s.frozen for s in self.schedules.values())

    def copy(self) -> "TrainState":
        return copy.deepcopy(self)


@dataclass
class Cache:
    graph: Graph
    output: int
    version: int


def forward(spec: ModelSpec, X, state: TrainState, config: CompressionConfig) -> tuple[np.ndarray, Cache]:
    """Log-probabilities of shape (N, T, classes) for frames ``X`` of shape (N, T, F)."""
    X = np.asarray(X)
    if X.ndim != 3 or X.shape[2] != spec.input_dim:
        raise InvalidShape(f"expected (N, T, {spec.input_dim}) frames, got {X.shape}")
    N, T, F = X.shape
    g = Graph(state.params, version=state.version)
    h = g.input(X.reshape(N * T, F))
    layers = spec.layers()
    for k, (prefix, _, _) in enumerate(layers):
        wname = f"{prefix}.weight"
        w, b = g.param(wname), g.param(f"{prefix}.bias")
        if config.compresses(wname):
            h = g.compressed_linear(h, w, b, config.scheme, state.masks.get(wname))
        else:
            h = g.linear(h, w, b)
        if k < len(layers) - 1:
            h = g.relu(h)
    out = g.log_softmax(h)
    return g.value(out).reshape(N, T, spec.num_classes), Cache(g, out, state.version)


def backward_ste(cache: Cache, grad_out, state: TrainState | None = None) -> dict[str, np.ndarray]:
    """Parameter gradients from ``dL/d(log_probs)``.

    Quantized layers get the dense-layer gradient; pruned positions get zero.
    """
    if state is not None and state.version != cache.version:
        raise InvalidState("forward cache is stale: parameters changed since the forward pass")
    out_shape = cache.graph.nodes[cache.output].shape
    return cache.graph.backward(cache.output, np.asarray(grad_out).reshape(out_shape))


def batch_ctc(log_probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean CTC loss over a batch and its gradient."""
    N = log_probs.shape[0]
    total = 0.0
    grad = np.zeros(log_probs.shape, dtype=np.float64)
    for n in range(N):
        loss, g = ctc_loss(log_probs[n], labels[n])
        total += loss
        grad[n] = g
    return total / N, grad / N


# ---------------------------------------------------------------------------
# synthetic task


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: list[list[int]]
    X_test: np.ndarray
    y_test: list[list[int]]
    vocab_size: int

    @property
    def input_dim(self) -> int:
        return self.X_train.shape[2]


def _frame_classes(labels, frames: int, rng, blank: int) -> np.ndarray:
    seq = [blank] * int(rng.integers(0, 3))
    for pos, lab in enumerate(labels):
        if pos and labels[pos - 1] == lab:
            seq.append(blank)
        seq += [lab] * int(rng.integers(1, 4))
        seq += [blank] * int(rng.integers(0, 2))
    if len(seq) > frames:
        raise InvalidConfig(f"{frames} frames too short for label sequence {labels}")
    return np.array(seq + [blank] * (frames - len(seq)))


def make_synthetic_task(
    seed: int = 0,
    vocab_size: int = 8,
    frames: int = 24,
    feature_dim: int = 16,
    noise: float = 0.3,
    gains: tuple[float, ...] = (1.0, 0.1),
    n_train: int = 512,
    n_test: int = 128,
    min_len: int = 2,
    max_len: int = 4,
) -> Dataset:
    """Planted label sequences rendered as noisy frame features.

    Each frame's class (a label or the blank) is a one-hot code observed
    through ``len(gains)`` independent views. A view mixes the code through
    its own fixed random rotation into ``feature_dim`` features, adds
    Gaussian noise of std ``noise`` and multiplies by its gain, so every view
    has the same signal-to-noise ratio but a different magnitude. The input
    has ``feature_dim * len(gains)`` features, views concatenated in order.
    """
    rng = np.random.default_rng(seed)
    blank = vocab_size
    classes = vocab_size + 1
    if feature_dim < classes:
        raise InvalidConfig("feature_dim must be at least vocab_size + 1")
    codebooks = []
    for _ in gains:
        rot, _ = np.linalg.qr(rng.standard_normal((feature_dim, feature_dim)))
        codebooks.append(np.eye(classes, feature_dim) @ rot)
    width = feature_dim * len(gains)

    def split(n):
        X = np.empty((n, frames, width), dtype=np.float32)
        ys = []
        for i in range(n):
            labels = rng.integers(0, vocab_size, int(rng.integers(min_len, max_len + 1))).tolist()
            cls = _frame_classes(labels, frames, rng, blank)
            for v, (gain, book) in enumerate(zip(gains, codebooks)):
                view = book[cls] + noise * rng.standard_normal((frames, feature_dim))
                X[i, :, v * feature_dim : (v + 1) * feature_dim] = gain * view
            ys.append(labels)
        return X, ys

    X_train, y_train = split(n_train)
    X_test, y_test = split(n_test)
    return Dataset(X_train, y_train, X_test, y_test, vocab_size)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]
    token_error_rate: float


def init_state(spec: ModelSpec, config: CompressionConfig, seed: int) -> TrainState:
    state = TrainState(init_params(spec, seed))
    for prefix, fan_in, _ in spec.layers():
        wname = f"{prefix}.weight"
        if not config.compresses(wname):
            continue
        if config.scheme is not None and fan_in % config.scheme.sub_channels:
            raise InvalidConfig(f"{wname}: {fan_in} rows not divisible into {config.scheme.sub_channels} sub-channels")
        if config.pattern is not None:
            state.schedules[wname] = PruneSchedule(config.prune_steps)
    return state


def update_masks(state: TrainState, config: CompressionConfig) -> None:
    """Mask refresh of one step; pruned weights are zeroed once a schedule freezes."""
    for wname, sched in state.schedules.items():
        was_frozen = sched.frozen
        mask, _ = schedule_step(sched, state.params[wname], config.pattern, state.masks.get(wname))
        state.masks[wname] = mask
        if sched.frozen and not was_frozen:
            state.params[wname] = prune(state.params[wname], mask)


def predict_log_probs(spec: ModelSpec, state: TrainState, config: CompressionConfig, X) -> np.ndarray:
    return forward(spec, X, state, config)[0]


def evaluate(spec: ModelSpec, state: TrainState, config: CompressionConfig, X, y) -> float:
    lp = predict_log_probs(spec, state, config, X)
    return token_error_rate(y, [greedy_ctc_decode(seq) for seq in lp])


def train(
    dataset: Dataset,
    spec: ModelSpec,
    config: CompressionConfig,
    steps: int,
    prune_steps: int | None = None,
    seed: int = 0,
    batch_size: int = 16,
    schedule: TransformerSchedule | None = None,
    state: TrainState | None = None,
) -> TrainResult:
    if prune_steps is not None and prune_steps != config.prune_steps:
        config = CompressionConfig(config.scheme, config.pattern, prune_steps, config.layer_filter)
    if steps < 1:
        raise InvalidConfig("need at least one training step")
    # a resumed run only needs room for the mask steps it has not yet taken
    done = state.step if state is not None else 0
    if config.pattern is not None and config.prune_steps - done > steps:
        raise InvalidConfig("prune_steps cannot exceed the number of training steps")
    schedule = schedule or TransformerSchedule()
    state = state or init_state(spec, config, seed)
    rng = np.random.default_rng(seed)
    n = dataset.X_train.shape[0]
    log: list[dict] = []
    order = rng.permutation(n)
    cursor = 0

    for _ in range(steps):
        if cursor + batch_size > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size

        last_good = state.copy()
        update_masks(state, config)
        lp, cache = forward(spec, dataset.X_train[idx], state, config)
        loss, grad = batch_ctc(lp, [dataset.y_train[i] for i in idx])
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {state.step}", state=last_good, log=log)
        grads = backward_ste(cache, grad.astype(np.float32), state)
        keep = {name: m.bits for name, m in state.masks.items()}
        lr = adam_step(state.params, grads, state.opt, schedule, keep)
        state.version += 1
        log.append({"step": state.step, "loss": loss, "lr": lr, "masks_frozen": state.masks_frozen})
        state.step += 1

    ter = evaluate(spec, state, config, dataset.X_test, dataset.y_test)
    return TrainResult(state, log, ter)


def export_checkpoint(state: TrainState, config: CompressionConfig) -> Checkpoint:
    """Final weights in native storage, using the frozen training masks."""
    ckpt = Checkpoint()
    for name, W in state.params.items():
        if config.compresses(name):
            entries = compress_weight(name, W, config.scheme, config.pattern, state.masks.get(name))
        else:
            entries = {name: TensorPayload.from_array(W)}
        for entry_name, entry in entries.items():
            ckpt.add(entry_name, entry)
    return ckpt


def params_from_checkpoint(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    """Dense float32 parameters from an uncompressed checkpoint (fine-tuning start point)."""
    params = {}
    for name, p in ckpt:
        if is_compressed(p):
            raise InvalidConfig(f"entry {name!r} is compressed; training needs float weights")
        params[name] = p.to_array()
    return params
