"""Desk-scale analogue of the quantization / sparsity ablation grid.

A dense model is trained on the planted task first; every compressed
configuration then fine-tunes from those weights, the way the compressed
rows of the ablation start from one shared dense checkpoint.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .optim import TransformerSchedule
from .quant import QuantScheme
from .sparse import SparsityPattern
from .train import CompressionConfig, ModelSpec, init_state, make_synthetic_task, train

# label -> (config, note)
ABLATION = {
    "E12 int4 + 2:4 one-shot": CompressionConfig(QuantScheme(4), SparsityPattern(2, 4), prune_steps=1),
    "int2 symmetric": CompressionConfig(QuantScheme(2, symmetric=True)),
    "E4 int2 asymmetric": CompressionConfig(QuantScheme(2, symmetric=False)),
    "int2 + 2 sub-channel": CompressionConfig(QuantScheme(2, symmetric=False, sub_channels=2)),
    "int2 + 4 sub-channel": CompressionConfig(QuantScheme(2, symmetric=False, sub_channels=4)),
    "int2 + 8 sub-channel": CompressionConfig(QuantScheme(2, symmetric=False, sub_channels=8)),
}
SUB_CHANNEL_RUNS = ("int2 + 2 sub-channel", "int2 + 4 sub-channel", "int2 + 8 sub-channel")


@dataclass
class ExperimentResult:
    dense_ter: float
    ter: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0

    def rows(self) -> list[tuple[str, float]]:
        return [("B0 float32 dense", self.dense_ter)] + list(self.ter.items())


def run_desk_experiment(
    seed: int = 0,
    hidden: tuple[int, ...] = (32, 32),
    dense_steps: int = 1000,
    finetune_steps: int = 500,
    configs: dict[str, CompressionConfig] | None = None,
    verbose: bool = False,
) -> ExperimentResult:
    start = time.perf_counter()
    data = make_synthetic_task(seed)
    spec = ModelSpec(data.input_dim, data.vocab_size, hidden)
    dense = train(data, spec, CompressionConfig(), dense_steps, seed=seed, schedule=TransformerSchedule(0.3, 100))
    result = ExperimentResult(dense.token_error_rate)
    if verbose:
        print(f"B0 float32 dense: token error {dense.token_error_rate:.3f}")
    for label, config in (configs or ABLATION).items():
        state = init_state(spec, config, seed)
        state.params = {k: v.copy() for k, v in dense.state.params.items()}
        run = train(data, spec, config, finetune_steps, seed=seed, schedule=TransformerSchedule(0.1, 100), state=state)
        result.ter[label] = run.token_error_rate
        if verbose:
            print(f"{label}: token error {run.token_error_rate:.3f}")
    result.seconds = time.perf_counter() - start
    return result
