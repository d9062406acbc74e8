import json

import numpy as np
import pytest

from nmq.cli import main
from nmq.compress import compress_weight
from nmq.packed import from_payload, unpack
from nmq.quant import QuantScheme
from nmq.tensor_io import Checkpoint, TensorPayload, checkpoint_load, checkpoint_save


@pytest.fixture(scope="module")
def dense_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "dense.nmq"
    assert main(["train", "--steps", "20", "--hidden", "16,16", "--out", str(path)]) == 0
    return path


def test_train_writes_checkpoint_and_metrics(tmp_path, capsys):
    out, metrics = tmp_path / "m.nmq", tmp_path / "m.jsonl"
    code = main(["train", "--steps", "12", "--bits", "4", "--sparsity", "2:4", "--prune-steps", "1",
                 "--hidden", "16", "--lr", "0.1", "--out", str(out), "--metrics", str(metrics)])
    assert code == 0
    assert "token error rate" in capsys.readouterr().out
    rows = [json.loads(line) for line in metrics.read_text().splitlines()]
    assert len(rows) == 13 and rows[-1]["final"] is True
    assert set(rows[0]) == {"step", "loss", "lr", "masks_frozen"}
    ckpt = checkpoint_load(out)
    assert ckpt["layer0.linear.weight"].mask == "layer0.linear.weight.mask"


@pytest.mark.parametrize("argv", [
    ["train", "--steps", "0"],
    ["train", "--bits", "32", "--sub-channels", "4"],
    ["train", "--bits", "5"],
    ["train", "--sparsity", "3:4"],
    ["train", "--bits", "32", "--symmetric"],
    ["train", "--steps", "3", "--sparsity", "2:4", "--prune-steps", "9"],
    ["train", "--steps", "3", "--bits", "4", "--sub-channels", "3"],
    ["verify", "--cases", "-1"],
    ["nonsense"],
    [],
])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_seed_env_override(monkeypatch, capsys):
    monkeypatch.setenv("NMQ_SEED", "x")
    assert main(["verify", "--cases", "1"]) == 2
    monkeypatch.setenv("NMQ_SEED", "4")
    assert main(["verify", "--cases", "3"]) == 0


def test_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bits": 4, "sparsity": "2:4", "steps": 4, "hidden": "8", "lr": 0.05}))
    out = tmp_path / "c.nmq"
    assert main(["train", "--config", str(cfg), "--bits", "8", "--out", str(out)]) == 0
    assert checkpoint_load(out)["layer0.linear.weight"].quant.scheme.bits == 8  # flag wins
    cfg.write_text(json.dumps({"bits": 4, "colour": "red"}))
    assert main(["train", "--config", str(cfg)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2


def test_init_from_checkpoint(dense_ckpt, tmp_path):
    assert main(["train", "--steps", "3", "--hidden", "16,16", "--init", str(dense_ckpt), "--bits", "8"]) == 0
    assert main(["train", "--steps", "3", "--hidden", "8", "--init", str(dense_ckpt)]) == 2


def test_compress_identity_is_byte_copy(dense_ckpt, tmp_path):
    out = tmp_path / "copy.nmq"
    assert main(["compress", "--in", str(dense_ckpt), "--out", str(out), "--bits", "32", "--sparsity", "none"]) == 0
    assert out.read_bytes() == dense_ckpt.read_bytes()


def test_compress_int8_ptq(dense_ckpt, tmp_path):
    out = tmp_path / "int8.nmq"
    assert main(["compress", "--in", str(dense_ckpt), "--out", str(out), "--bits", "8"]) == 0
    ckpt = checkpoint_load(out)
    assert ckpt["layer0.linear.weight"].quant.scheme == QuantScheme(8)
    assert ckpt["softmax.weight"].quant is None


def test_compress_one_in_four(dense_ckpt, tmp_path):
    out = tmp_path / "s.nmq"
    assert main(["compress", "--in", str(dense_ckpt), "--out", str(out), "--bits", "4", "--sparsity", "1:4"]) == 0
    ckpt = checkpoint_load(out)
    q, mask = unpack(from_payload(ckpt, "layer1.linear.weight"))
    assert np.all(mask.bits.reshape(-1, 4).sum(axis=1) == 1)
    assert np.count_nonzero(q.codes) <= q.codes.size / 4


def test_compress_rejects_compressed_input(dense_ckpt, tmp_path):
    mid, out = tmp_path / "a.nmq", tmp_path / "b.nmq"
    assert main(["compress", "--in", str(dense_ckpt), "--out", str(mid), "--bits", "4"]) == 0
    assert main(["compress", "--in", str(mid), "--out", str(out), "--bits", "8"]) == 1
    assert main(["compress", "--in", str(tmp_path / "none.nmq"), "--out", str(out), "--bits", "8"]) == 1


def test_report_ratios(dense_ckpt, tmp_path, capsys):
    out = tmp_path / "e12.nmq"
    main(["compress", "--in", str(dense_ckpt), "--out", str(out), "--bits", "4", "--sparsity", "2:4"])
    capsys.readouterr()
    assert main(["report", "--in", str(out)]) == 0
    text = capsys.readouterr().out
    assert "compressed tensors" in text and "9.4%" in text
    assert main(["report", "--in", str(dense_ckpt), "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["estimated_ratio"] == data["actual_ratio"] == 1.0
    assert data["total_bytes"] == dense_ckpt.stat().st_size - 10


def test_report_sub_channel_width(tmp_path, capsys):
    W = np.random.default_rng(0).standard_normal((1536, 4)).astype(np.float32)
    ckpt = Checkpoint()
    ckpt.add("w.linear.weight", TensorPayload.from_array(W))
    src, out = tmp_path / "w.nmq", tmp_path / "w64.nmq"
    checkpoint_save(ckpt, src)
    assert main(["compress", "--in", str(src), "--out", str(out), "--bits", "2", "--sub-channels", "64"]) == 0
    capsys.readouterr()
    main(["report", "--in", str(out), "--json"])
    assert round(100 * json.loads(capsys.readouterr().out)["estimated_ratio"], 1) == 10.4


def test_report_corrupt_file(dense_ckpt, tmp_path, capsys):
    bad = tmp_path / "bad.nmq"
    bad.write_bytes(dense_ckpt.read_bytes()[:100])
    assert main(["report", "--in", str(bad)]) == 1
    assert "FormatError" in capsys.readouterr().err


def test_verify(capsys):
    assert main(["verify", "--cases", "25", "--seed", "1"]) == 0
    assert "all 25 cases passed" in capsys.readouterr().out
    assert main(["verify", "--cases", "0"]) == 0
    assert main(["verify", "--cases", "25", "--inject-fault", "matmul"]) == 1
    out = capsys.readouterr().out
    assert "FAILED group=matmul" in out
    assert json.loads(out.splitlines()[-1])["group"] == "matmul"
