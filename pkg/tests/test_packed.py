import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nmq.errors import FormatError, InvalidShape, InvalidState, Unsupported
from nmq.packed import (
    PackedWeight,
    decode_codes,
    encode_codes,
    from_payload,
    pack,
    pack_bits,
    packed_matmul,
    to_payloads,
    unpack,
)
from nmq.quant import QuantizedTensor, QuantScheme, dequantize, quantize_weight, quantized_matmul_ref
from nmq.sizer import predicted_payload_bytes
from nmq.sparse import SparsityMask, SparsityPattern, make_mask, prune
from nmq.tensor_io import Checkpoint, deserialize, serialize
from nmq.verify import compress_case, random_matmul_case

P24, P14 = SparsityPattern(2, 4), SparsityPattern(1, 4)


def test_int4_layout():
    assert encode_codes(np.array([1, -2]), QuantScheme(4)) == b"\xe1"
    assert decode_codes(b"\xe1", QuantScheme(4), 2).tolist() == [1, -2]


def test_int2_asym_layout():
    assert encode_codes(np.array([0, 1, 2, 3]), QuantScheme(2, symmetric=False)) == bytes([0b11100100])


def test_int2_sym_twos_complement():
    assert encode_codes(np.array([-1, 0, 1, -1]), QuantScheme(2)) == bytes([0b11010011])
    assert decode_codes(bytes([0b11010011]), QuantScheme(2), 4).tolist() == [-1, 0, 1, -1]


def test_int8_is_byte_copy():
    codes = np.array([[-127, 5], [0, 127]])
    q = QuantizedTensor(codes, np.ones((1, 2)), np.zeros((1, 2)), QuantScheme(8), (2, 2))
    p = pack(q)
    assert p.value_bytes == np.array([-127, 5, 0, 127], np.int8).tobytes()
    assert unpack(p)[0] == q


def test_zero_codes_pack_to_zero_bytes():
    q = QuantizedTensor(np.zeros((4, 3)), np.ones((1, 3)), np.zeros((1, 3)), QuantScheme(4), (4, 3))
    assert pack(q).value_bytes == bytes(6)


def test_sparse_group_layout():
    scheme = QuantScheme(4)
    p = PackedWeight(scheme, (1, 4), encode_codes(np.array([-5, 3]), scheme), np.ones((1, 4), np.float32),
                     np.zeros((1, 4), np.int32), P24, pack_bits(np.array([1, 2]), 2))
    q, mask = unpack(p)
    assert q.codes.tolist() == [[0, -5, 3, 0]]
    assert mask.bits.tolist() == [[False, True, True, False]]


def test_duplicate_index_is_format_error():
    scheme = QuantScheme(4)
    p = PackedWeight(scheme, (1, 4), encode_codes(np.array([-5, 3]), scheme), np.ones((1, 4), np.float32),
                     np.zeros((1, 4), np.int32), P24, pack_bits(np.array([2, 2]), 2))
    with pytest.raises(FormatError):
        unpack(p)


def test_nonzero_code_at_pruned_position():
    q = quantize_weight(np.arange(1, 9, dtype=np.float32).reshape(2, 4), QuantScheme(8))
    with pytest.raises(InvalidState):
        pack(q, make_mask(np.arange(8.0).reshape(2, 4), P24))


def test_m_other_than_four_unsupported():
    W = np.arange(1, 9, dtype=np.float32).reshape(2, 4)
    mask = make_mask(W, SparsityPattern(1, 2))
    with pytest.raises(Unsupported):
        pack(quantize_weight(prune(W, mask), QuantScheme(8)), mask)


def test_identity_input_gives_dequantized_weight():
    W = np.random.default_rng(0).standard_normal((4, 3)).astype(np.float32)
    q = quantize_weight(W, QuantScheme(4))
    assert np.array_equal(packed_matmul(np.eye(4, dtype=np.float32), pack(q)), dequantize(q))


def test_all_zero_sparse_codes_give_zero_output():
    q = QuantizedTensor(np.zeros((4, 4)), np.ones((1, 4)), np.zeros((1, 4)), QuantScheme(4), (4, 4))
    mask = SparsityMask(np.tile([True, False, False, False], (4, 1)), P14)
    out = packed_matmul(np.random.default_rng(1).standard_normal((3, 4)), pack(q, mask))
    assert not out.any()


def test_shape_mismatch():
    q = quantize_weight(np.ones((4, 2)), QuantScheme(8))
    with pytest.raises(InvalidShape):
        packed_matmul(np.ones((2, 3)), pack(q))


@given(st.integers(0, 2**32 - 1))
def test_roundtrip_and_bit_exact_matmul(seed):
    case = random_matmul_case(np.random.default_rng(seed),
                              schemes=(QuantScheme(8), QuantScheme(4), QuantScheme(2), QuantScheme(2, False),
                                       QuantScheme(4, False), QuantScheme(8, False)))
    q, mask = compress_case(case)
    p = pack(q, mask)
    q2, mask2 = unpack(p)
    assert q2 == q
    assert (mask2 is None) == (mask is None) and (mask is None or mask2 == mask)
    assert packed_matmul(case.X, p).tobytes() == quantized_matmul_ref(case.X, q).tobytes()
    if mask is not None:
        assert len(p.value_bytes) == -(-q.codes.size // 4 * mask.pattern.n * q.scheme.bits // 8)
    assert p.storage_nbytes == predicted_payload_bytes(q.orig_shape, q.scheme, case.pattern)


@given(st.integers(0, 2**32 - 1))
def test_checkpoint_payload_roundtrip(seed):
    case = random_matmul_case(np.random.default_rng(seed))
    q, mask = compress_case(case)
    p = pack(q, mask)
    ckpt = Checkpoint()
    for name, entry in to_payloads("w", p).items():
        ckpt.add(name, entry)
    back = from_payload(deserialize(serialize(ckpt)), "w")
    assert unpack(back)[0] == q
    assert packed_matmul(case.X, back).tobytes() == packed_matmul(case.X, p).tobytes()
