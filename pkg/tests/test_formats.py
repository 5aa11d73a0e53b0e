import struct

import numpy as np
import pytest

from uhredit.formats import (
    FormatError,
    read_embedding,
    read_flow,
    read_tensor,
    write_embedding,
    write_flow,
    write_tensor,
)


def test_embedding_round_trip(tmp_path):
    vec = np.arange(7, dtype=np.float64) / 3.0
    path = tmp_path / "v.emb"
    write_embedding(path, vec)
    back = read_embedding(path)
    assert back.shape == (7,)
    assert np.allclose(back, vec, atol=1e-6)  # f32 payload


def test_embedding_layout(tmp_path):
    path = tmp_path / "v.emb"
    write_embedding(path, np.array([1.0, 2.0]))
    raw = path.read_bytes()
    assert raw[:4] == b"EMB1"
    assert struct.unpack("<I", raw[4:8]) == (2,)
    assert struct.unpack("<2f", raw[8:]) == (1.0, 2.0)


def test_embedding_bad_magic(tmp_path):
    path = tmp_path / "bad.emb"
    path.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(FormatError):
        read_embedding(path)


def test_embedding_truncated(tmp_path):
    path = tmp_path / "short.emb"
    path.write_bytes(b"EMB1" + struct.pack("<I", 10) + b"\x00" * 8)
    with pytest.raises(FormatError, match="truncated"):
        read_embedding(path)


def test_flow_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    u = rng.normal(size=(5, 9))
    v = rng.normal(size=(5, 9))
    path = tmp_path / "f.flo"
    write_flow(path, u, v)
    bu, bv = read_flow(path)
    assert bu.shape == (5, 9)
    assert np.allclose(bu, u, atol=1e-6)
    assert np.allclose(bv, v, atol=1e-6)
    raw = path.read_bytes()
    assert raw[:4] == b"FLO1"
    assert struct.unpack("<II", raw[4:12]) == (5, 9)


def test_flow_shape_mismatch():
    with pytest.raises(ValueError):
        write_flow("unused", np.zeros((2, 2)), np.zeros((3, 2)))


def test_tensor_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    for shape in [(4,), (3, 5), (2, 3, 4)]:
        arr = rng.normal(size=shape)
        path = tmp_path / "t.ten"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)  # f64 payload is exact


def test_tensor_header_layout(tmp_path):
    path = tmp_path / "t.ten"
    write_tensor(path, np.zeros((2, 3)))
    raw = path.read_bytes()
    assert raw[:4] == b"TEN1"
    assert struct.unpack("<3I", raw[4:16]) == (2, 2, 3)


def test_tensor_bad_magic(tmp_path):
    path = tmp_path / "bad.ten"
    path.write_bytes(b"XXXX")
    with pytest.raises(FormatError):
        read_tensor(path)
