"""scikit-learn style wrappers.

``WeightCompressor`` is a transformer: ``fit`` learns the mask and the
quantized, packed form of a weight matrix; ``transform`` applies that
compressed linear map to inputs with the native kernel.

``CTCCompressedModel`` is an estimator over frame sequences: ``fit`` runs
joint prune/quantize-aware training, ``predict`` returns greedy CTC label
sequences, ``score`` is one minus the token error rate.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .ctc import greedy_ctc_decode, token_error_rate
from .errors import InvalidConfig
from .optim import TransformerSchedule
from .packed import pack, packed_matmul
from .quant import QuantScheme, dequantize, quantize_weight
from .sizer import estimate_ratio
from .sparse import SparsityPattern, make_mask, prune
from .train import CompressionConfig, Dataset, ModelSpec, export_checkpoint, forward, init_state, train


def build_scheme(bits: int, symmetric: bool | None = None, sub_channels: int = 1) -> QuantScheme | None:
    """Scheme for ``bits`` (32 means no quantization); int2 defaults to asymmetric."""
    if bits == 32:
        if sub_channels != 1:
            raise InvalidConfig("sub-channels only apply to quantized weights")
        return None
    if symmetric is None:
        symmetric = bits != 2
    return QuantScheme(bits=bits, symmetric=symmetric, sub_channels=sub_channels)


class WeightCompressor(TransformerMixin, BaseEstimator):
    """Compress one weight matrix and apply it as a fixed linear map.

    Parameters
    ----------
    weight : array of shape (n_features, n_outputs) or None
        Matrix to compress. When ``None``, ``fit(W)`` compresses its argument
        instead; with a weight set, ``fit(X)`` only checks ``X``'s width, so
        the compressor can sit inside a ``Pipeline``.
    bits : {32, 8, 4, 2}
    symmetric : bool or None
        ``None`` picks symmetric for 8/4 bits and asymmetric for 2 bits.
    sub_channels : int
        Scale groups per output channel.
    sparsity : str
        ``"none"`` or an ``"N:M"`` pattern such as ``"2:4"``.
    """

    def __init__(self, weight=None, bits=8, symmetric=None, sub_channels=1, sparsity="none"):
        self.weight = weight
        self.bits = bits
        self.symmetric = symmetric
        self.sub_channels = sub_channels
        self.sparsity = sparsity

    def fit(self, X, y=None):
        if self.weight is None:
            W = check_array(X, dtype=np.float32)
        else:
            W = check_array(self.weight, dtype=np.float32)
            X = check_array(X, dtype=np.float32)
            if X.shape[1] != W.shape[0]:
                raise ValueError(f"X has {X.shape[1]} features, weight expects {W.shape[0]}")
        scheme = build_scheme(self.bits, self.symmetric, self.sub_channels)
        pattern = SparsityPattern.parse(self.sparsity)
        self.mask_ = make_mask(W, pattern) if pattern is not None else None
        pruned = prune(W, self.mask_) if self.mask_ is not None else W
        self.quantized_ = quantize_weight(pruned, scheme) if scheme is not None else None
        self.packed_ = pack(self.quantized_, self.mask_) if scheme is not None else None
        self.weight_ = dequantize(self.quantized_) if scheme is not None else pruned
        self.n_features_in_ = W.shape[0]
        self.size_ratio_ = estimate_ratio(W.size, scheme, pattern, W.shape[0])
        return self

    def transform(self, X):
        check_is_fitted(self, "weight_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        if self.packed_ is not None:
            return packed_matmul(X, self.packed_)
        return X @ self.weight_


class CTCCompressedModel(BaseEstimator):
    """Linear+relu stack with CTC loss, trained with pruning and quantization in the loop."""

    def __init__(
        self,
        hidden=(32, 32),
        bits=32,
        symmetric=None,
        sub_channels=1,
        sparsity="none",
        prune_steps=1,
        steps=1000,
        batch_size=16,
        base_lr=0.3,
        warmup=100,
        layer_filter="*linear*",
        random_state=0,
        warm_start_params=None,
    ):
        self.hidden = hidden
        self.bits = bits
        self.symmetric = symmetric
        self.sub_channels = sub_channels
        self.sparsity = sparsity
        self.prune_steps = prune_steps
        self.steps = steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.warmup = warmup
        self.layer_filter = layer_filter
        self.random_state = random_state
        self.warm_start_params = warm_start_params

    def _config(self) -> CompressionConfig:
        return CompressionConfig(
            build_scheme(self.bits, self.symmetric, self.sub_channels),
            SparsityPattern.parse(self.sparsity),
            self.prune_steps,
            self.layer_filter,
        )

    def fit(self, X, y):
        X = check_array(X, dtype=np.float32, allow_nd=True)
        if X.ndim != 3:
            raise ValueError(f"X must be (n_sequences, frames, features), got shape {X.shape}")
        if len(y) != X.shape[0]:
            raise ValueError("X and y have different numbers of sequences")
        labels = [list(map(int, seq)) for seq in y]
        vocab = max((max(seq) for seq in labels if seq), default=0) + 1
        self.config_ = self._config()
        self.spec_ = ModelSpec(X.shape[2], vocab, tuple(self.hidden))
        data = Dataset(X, labels, X[:0], [], vocab)
        state = init_state(self.spec_, self.config_, self.random_state)
        if self.warm_start_params is not None:
            state.params = {k: np.array(v, dtype=np.float32) for k, v in self.warm_start_params.items()}
        result = train(
            data,
            self.spec_,
            self.config_,
            self.steps,
            seed=self.random_state,
            batch_size=self.batch_size,
            schedule=TransformerSchedule(self.base_lr, self.warmup),
            state=state,
        )
        self.state_ = result.state
        self.log_ = result.log
        self.n_features_in_ = X.shape[2]
        return self

    def predict_log_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float32, allow_nd=True)
        return forward(self.spec_, X, self.state_, self.config_)[0]

    def predict(self, X) -> list[list[int]]:
        return [greedy_ctc_decode(seq) for seq in self.predict_log_proba(X)]

    def score(self, X, y) -> float:
        return 1.0 - token_error_rate(y, self.predict(X))

    def to_checkpoint(self):
        check_is_fitted(self, "state_")
        return export_checkpoint(self.state_, self.config_)
