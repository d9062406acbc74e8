import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nmq.compress import compress_weight
from nmq.errors import InvalidConfig
from nmq.quant import QuantScheme
from nmq.sizer import estimate_ratio, measure_actual, predicted_payload_bytes
from nmq.sparse import SparsityPattern
from nmq.tensor_io import Checkpoint, DType, TensorPayload, checkpoint_save, serialize

I = 1536
P = I * 1536
TABLE_ROWS = [
    ("int8", QuantScheme(8), None, 25.0),
    ("int4", QuantScheme(4), None, 12.5),
    ("int2", QuantScheme(2, False), None, 6.25),
    ("int2 + 16 sub-channel", QuantScheme(2, False, 16), None, 6.25 + 100 * 16 / 1536),
    ("int2 + 32 sub-channel", QuantScheme(2, False, 32), None, 6.25 + 100 * 32 / 1536),
    ("int2 + 64 sub-channel", QuantScheme(2, False, 64), None, 6.25 + 100 * 64 / 1536),
    ("2:4 float32", None, SparsityPattern(2, 4), 53.125),
    ("1:4 float32", None, SparsityPattern(1, 4), 28.125),
    ("int4 + 2:4", QuantScheme(4), SparsityPattern(2, 4), 9.375),
]
PUBLISHED = [25.0, 12.5, 6.3, 7.3, 8.3, 10.4, 53.1, 28.1, 9.4]


@pytest.mark.parametrize("row,published", list(zip(TABLE_ROWS, PUBLISHED)), ids=[r[0] for r in TABLE_ROWS])
def test_table_ratios(row, published):
    _, scheme, pattern, exact = row
    ratio = 100 * estimate_ratio(P, scheme, pattern, I)
    assert ratio == pytest.approx(exact, abs=1e-9)
    assert abs(ratio - published) <= 0.1


def test_no_compression_is_full_size():
    assert estimate_ratio(10) == 1.0


def test_errors():
    with pytest.raises(InvalidConfig):
        estimate_ratio(0)
    with pytest.raises(InvalidConfig):
        estimate_ratio(100, QuantScheme(2, False, 4))


bits = st.sampled_from([2, 4, 8, 32])
patterns = st.sampled_from([SparsityPattern(1, 4), SparsityPattern(2, 4), None])


def _ratio(b, pattern, sub):
    scheme = None if b == 32 else QuantScheme(b, sub_channels=sub)
    return estimate_ratio(1000, scheme, pattern, 64)


@given(bits, bits, patterns, st.sampled_from([1, 2, 4, 8]))
def test_monotone_in_bits(b1, b2, pattern, sub):
    lo, hi = sorted((b1, b2))
    sub_lo = 1 if lo == 32 else sub
    sub_hi = 1 if hi == 32 else sub
    if (lo == 32) == (hi == 32):
        assert _ratio(lo, pattern, sub_lo) <= _ratio(hi, pattern, sub_hi)


@given(bits, st.sampled_from([1, 2, 4, 8]), st.sampled_from([1, 2, 4, 8]))
def test_monotone_in_density_and_sub_channels(b, s1, s2):
    if b == 32:
        s1 = s2 = 1
    assert _ratio(b, SparsityPattern(1, 4), s1) <= _ratio(b, SparsityPattern(2, 4), s1) <= _ratio(b, None, s1) + 1 / 32
    lo, hi = sorted((s1, s2))
    assert _ratio(b, None, lo) <= _ratio(b, None, hi)


def _single(name, W, scheme, pattern):
    ckpt = Checkpoint()
    for n, entry in compress_weight(name, W, scheme, pattern).items():
        ckpt.add(n, entry)
    return ckpt


def test_dense_actual_equals_estimate():
    ckpt = Checkpoint()
    ckpt.add("w", TensorPayload.from_array(np.ones((4, 5), np.float32)))
    report = measure_actual(ckpt)
    assert report.ratio_vs_f32 == report.estimated_ratio == 1.0


def test_orphan_bitmask_counted_once(tmp_path):
    ckpt = _single("w", np.ones((4, 4), np.float32), QuantScheme(4), SparsityPattern(2, 4))
    ckpt.add("stray", TensorPayload(DType.BITMASK, (16,), bytes(2)))
    path = tmp_path / "c.nmq"
    checkpoint_save(ckpt, path)
    report = measure_actual(ckpt)
    assert [layer.name for layer in report.layers].count("stray") == 1
    assert report.total_bytes == path.stat().st_size - 10


def test_int4_odd_count_padding():
    W = np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32)
    report = measure_actual(_single("w", W, QuantScheme(4), None))
    layer = report.layers[0]
    assert layer.payload_bytes == 5  # 9 nibbles -> 4.5 bytes -> 5
    assert report.ratio_vs_f32 > report.estimated_ratio
    delta_bytes = (report.ratio_vs_f32 - report.estimated_ratio) * 9 * 4
    assert delta_bytes == pytest.approx(0.5 + 3 * 4)  # half byte of padding + three f32 scales


def test_sparse_int4_delta_itemized():
    W = np.random.default_rng(1).standard_normal((64, 16)).astype(np.float32)
    report = measure_actual(_single("w", W, QuantScheme(4), SparsityPattern(2, 4)))
    layer = report.layers[0]
    assert report.estimated_ratio == pytest.approx(0.09375)
    assert layer.payload_bytes + layer.mask_bytes == predicted_payload_bytes(W.shape, QuantScheme(4), SparsityPattern(2, 4))
    delta_bytes = layer.data_bytes - report.estimated_ratio * W.size * 4
    assert delta_bytes == pytest.approx(layer.scale_bytes)  # no padding at this size


def test_sub_channel_report_at_full_width():
    W = np.random.default_rng(2).standard_normal((I, 8)).astype(np.float32)
    report = measure_actual(_single("w", W, QuantScheme(2, False, 64), None))
    assert round(100 * report.estimated_ratio, 1) == 10.4


def test_total_bytes_is_file_minus_header():
    rng = np.random.default_rng(3)
    ckpt = Checkpoint()
    for n, e in compress_weight("a.linear.weight", rng.standard_normal((8, 4)), QuantScheme(2, False, 2),
                                SparsityPattern(1, 4)).items():
        ckpt.add(n, e)
    ckpt.add("b", TensorPayload.from_array(rng.standard_normal(7)))
    report = measure_actual(ckpt)
    assert report.total_bytes == len(serialize(ckpt)) - 10
    assert report.file_bytes == len(serialize(ckpt))


def test_text_and_json():
    W = np.random.default_rng(4).standard_normal((16, 8)).astype(np.float32)
    report = measure_actual(_single("layer0.linear.weight", W, QuantScheme(4), SparsityPattern(2, 4)))
    text = report.to_text()
    assert "9.4%" in text and "layer0.linear.weight" in text
    data = report.to_dict()
    assert data["compressed"]["estimated_ratio"] == pytest.approx(0.09375)
    assert math.isclose(data["delta"], data["actual_ratio"] - data["estimated_ratio"])
