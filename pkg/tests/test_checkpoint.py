"""Checkpoint format: byte layout, round trips, refusal paths."""

import json
import struct

import numpy as np
import numpy.testing as npt
import pytest

from trifusion.checkpoint import (MAGIC, VERSION, fingerprint,
                                  load_checkpoint, restore_into,
                                  save_checkpoint)
from trifusion.config import ModelSection, build_model
from trifusion.errors import CheckpointError
from trifusion.layers import Module
from trifusion.tensor import Parameter


class OneParamModel(Module):
    def __init__(self, values):
        self.w = Parameter(values)


def test_golden_file_layout(tmp_path):
    """Byte-level check of the documented header layout."""
    model = OneParamModel([1.0, 2.0, 3.0])
    cfg = {"arch": "one-param"}
    path = tmp_path / "golden.elck"
    save_checkpoint(path, model, cfg)
    blob = path.read_bytes()
    assert blob[:4] == b"ELCK" == MAGIC
    assert struct.unpack_from("<H", blob, 4)[0] == VERSION == 1
    header_len = struct.unpack_from("<I", blob, 6)[0]
    header = json.loads(blob[10:10 + header_len].decode())
    assert header["fingerprint"] == fingerprint(cfg)
    assert header["entries"] == [{"name": "w", "shape": [3], "offset": 0,
                                  "kind": "param"}]
    payload = blob[10 + header_len:]
    assert payload == np.array([1.0, 2.0, 3.0], dtype="<f4").tobytes()


def test_roundtrip_bit_exact_at_float32(tmp_path):
    model = build_model(ModelSection(preset="tiny", head_hidden=16), seed=1)
    before = {n: t.data.copy() for n, t in model.named_state()}
    cfg = ModelSection(preset="tiny", head_hidden=16).resolved()
    path = tmp_path / "model.elck"
    save_checkpoint(path, model, cfg, metadata={"note": "test"})

    fresh = build_model(ModelSection(preset="tiny", head_hidden=16), seed=999)
    ckpt = load_checkpoint(path)
    assert ckpt.metadata["note"] == "test"
    restore_into(fresh, ckpt)
    for name, tensor in fresh.named_state():
        npt.assert_array_equal(tensor.data.astype(np.float32),
                               before[name].astype(np.float32),
                               err_msg=name)


def test_float32_cast_error_bounded(tmp_path):
    rng = np.random.default_rng(2)
    values = rng.uniform(-3, 3, size=4096)
    model = OneParamModel(values)
    path = tmp_path / "m.elck"
    save_checkpoint(path, model, {"a": 1})
    restored = load_checkpoint(path).arrays["w"].astype(np.float64)
    rel = np.abs(restored - values) / np.maximum(np.abs(values), 1e-300)
    assert rel.max() <= 2.0 ** -24


def test_fingerprint_tamper_refused(tmp_path):
    model = OneParamModel([1.0])
    path = tmp_path / "m.elck"
    save_checkpoint(path, model, {"a": 1})
    blob = bytearray(path.read_bytes())
    fp = fingerprint({"a": 1}).encode()
    i = bytes(blob).find(fp)
    assert i > 0
    blob[i] = ord("0") if blob[i] != ord("0") else ord("1")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(path)


def test_bad_magic_refused(tmp_path):
    path = tmp_path / "m.elck"
    save_checkpoint(path, OneParamModel([1.0]), {"a": 1})
    blob = bytearray(path.read_bytes())
    blob[0] = ord("X")
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_unknown_version_refused(tmp_path):
    path = tmp_path / "m.elck"
    save_checkpoint(path, OneParamModel([1.0]), {"a": 1})
    blob = bytearray(path.read_bytes())
    struct.pack_into("<H", blob, 4, 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_truncation_refused(tmp_path):
    path = tmp_path / "m.elck"
    save_checkpoint(path, OneParamModel(np.ones(16)), {"a": 1})
    blob = path.read_bytes()
    for cut in (4, len(blob) - 8):
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)


def test_state_mismatch_refused(tmp_path):
    path = tmp_path / "m.elck"
    save_checkpoint(path, OneParamModel([1.0, 2.0]), {"a": 1})
    ckpt = load_checkpoint(path)

    class Other(Module):
        def __init__(self):
            self.b = Parameter([0.0])

    with pytest.raises(CheckpointError, match="mismatch"):
        restore_into(Other(), ckpt)
