"""N:M structured sparsity and low-bit weight quantization for CTC models.

The pieces, bottom up:

* :mod:`nmq.tensor_io` - tensors, deterministic init, the ``NMQC`` checkpoint container
* :mod:`nmq.quant` - per-channel and sub-channel weight quantization
* :mod:`nmq.sparse` - N:M magnitude masks and the prune schedule
* :mod:`nmq.packed` - bit-packed storage and the packed matmul kernel
* :mod:`nmq.train` - quantization/sparsity-aware training with CTC loss
* :mod:`nmq.sizer` - size estimates and byte-accurate accounting
* :mod:`nmq.cli` - the ``nmq`` command
"""

from .compress import NativeModel, compress_checkpoint, compress_weight
from .ctc import ctc_loss, greedy_ctc_decode, token_error_rate
from .errors import (
    DivergenceError,
    FormatError,
    InvalidConfig,
    InvalidShape,
    InvalidState,
    InvalidValue,
    IoError,
    NMQError,
    Unsupported,
)
from .estimators import CTCCompressedModel, WeightCompressor
from .optim import AdamState, TransformerSchedule, adam_step
from .packed import PackedWeight, pack, packed_matmul, unpack
from .quant import QuantizedTensor, QuantScheme, dequantize, quantize_weight, quantized_matmul_ref
from .sizer import SizeReport, estimate_ratio, measure_actual
from .sparse import PruneSchedule, SparsityMask, SparsityPattern, make_mask, prune, schedule_step
from .tensor_io import Checkpoint, DType, TensorPayload, checkpoint_load, checkpoint_save, deserialize, serialize
from .train import CompressionConfig, ModelSpec, TrainState, backward_ste, forward, make_synthetic_task, train

__version__ = "0.1.0"
