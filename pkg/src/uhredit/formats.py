"""Binary wire formats for provider overrides and test fixtures.

All integers are unsigned 32-bit little-endian; floats are IEEE-754
little-endian.

EMB1  embedding vector:  magic "EMB1", dim, dim x f32
FLO1  dense flow field:  magic "FLO1", height, width, u-plane then v-plane as f32
TEN1  n-d tensor:        magic "TEN1", rank, dims..., f64 data (row-major)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

EMB_MAGIC = b"EMB1"
FLO_MAGIC = b"FLO1"
TEN_MAGIC = b"TEN1"


class FormatError(ValueError):
    """Malformed binary file (bad magic, truncated payload)."""


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def write_embedding(path: str | Path, vec: np.ndarray) -> None:
    vec = np.asarray(vec, dtype=np.float32).ravel()
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<I", vec.size))
        fh.write(vec.astype("<f4").tobytes())


def read_embedding(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != EMB_MAGIC:
            raise FormatError(f"not an EMB1 file: {path}")
        (dim,) = struct.unpack("<I", _read_exact(fh, 4, "dimension"))
        data = np.frombuffer(_read_exact(fh, 4 * dim, "payload"), dtype="<f4")
    return data.astype(np.float64)


def write_flow(path: str | Path, u: np.ndarray, v: np.ndarray) -> None:
    u = np.asarray(u, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if u.shape != v.shape or u.ndim != 2:
        raise ValueError("u and v must be 2-D arrays of equal shape")
    h, w = u.shape
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(u.astype("<f4").tobytes())
        fh.write(v.astype("<f4").tobytes())


def read_flow(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != FLO_MAGIC:
            raise FormatError(f"not a FLO1 file: {path}")
        h, w = struct.unpack("<II", _read_exact(fh, 8, "dimensions"))
        n = h * w
        u = np.frombuffer(_read_exact(fh, 4 * n, "u-plane"), dtype="<f4")
        v = np.frombuffer(_read_exact(fh, 4 * n, "v-plane"), dtype="<f4")
    return (
        u.astype(np.float64).reshape(h, w),
        v.astype(np.float64).reshape(h, w),
    )


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(TEN_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != TEN_MAGIC:
            raise FormatError(f"not a TEN1 file: {path}")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
        dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(_read_exact(fh, 8 * n, "payload"), dtype="<f8")
    return data.astype(np.float64).reshape(dims)
