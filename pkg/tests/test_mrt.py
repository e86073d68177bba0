import json
import struct

import numpy as np
import pytest

from stream4d import mrt


def test_round_trip_f64(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 2))
    path = tmp_path / "a.mrt"
    mrt.write_tensor(path, arr)
    back = mrt.read_tensor(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, arr)


def test_round_trip_f32(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = tmp_path / "a.mrt"
    mrt.write_tensor(path, arr, dtype="f32")
    back = mrt.read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, arr)


def test_wire_format(tmp_path):
    path = tmp_path / "a.mrt"
    mrt.write_tensor(path, np.array([[1.0, 2.0]]))
    raw = path.read_bytes()
    assert raw[:4] == b"MRT1"
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    assert header == {"dtype": "f64", "shape": [1, 2]}
    payload = np.frombuffer(raw[8 + hlen:], dtype="<f8")
    assert np.array_equal(payload, [1.0, 2.0])


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.mrt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="not an MRT1"):
        mrt.read_tensor(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.mrt"
    mrt.write_tensor(path, np.ones((4,)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="payload"):
        mrt.read_tensor(path)


def test_int_grid_round_trip(tmp_path):
    labels = np.array([[0, 3], [100, 7]])
    path = tmp_path / "seg.mrt"
    mrt.write_tensor(path, labels.astype(np.float64))
    assert np.array_equal(mrt.read_int_grid(path), labels)


def test_pgm(tmp_path):
    mask = np.array([[1, 0], [0, 1]])
    path = tmp_path / "m.pgm"
    mrt.write_pgm(path, mask)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert raw[-4:] == bytes([255, 0, 0, 255])


def test_deterministic_bytes(tmp_path):
    arr = np.random.default_rng(3).normal(size=(8, 8))
    a, b = tmp_path / "a.mrt", tmp_path / "b.mrt"
    mrt.write_tensor(a, arr)
    mrt.write_tensor(b, arr)
    assert a.read_bytes() == b.read_bytes()
