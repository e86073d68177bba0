"""MRT1 tensor files: magic, u32-le header length, JSON header, raw payload.

Header is UTF-8 JSON ``{"dtype":"f32"|"f64","shape":[...]}``; the payload is
the row-major little-endian array data. Integer-valued grids (segmentation
labels, binary masks) are stored as f64 and rounded by the caller on read.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MRT1"
_DTYPES = {"f32": "<f4", "f64": "<f8"}


def write_tensor(path, arr: np.ndarray, dtype: str = "f64") -> None:
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    arr = np.asarray(arr)
    header = json.dumps({"dtype": dtype, "shape": list(arr.shape)},
                        separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(payload)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an MRT1 file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise ValueError(f"{path}: unsupported dtype {dtype!r}")
    shape = tuple(int(s) for s in header["shape"])
    data = np.frombuffer(raw[8 + hlen:], dtype=_DTYPES[dtype])
    expect = int(np.prod(shape)) if shape else 1
    if data.size != expect:
        raise ValueError(f"{path}: payload holds {data.size} values, header says {expect}")
    return data.reshape(shape).astype(np.float64 if dtype == "f64" else np.float32)


def read_int_grid(path) -> np.ndarray:
    """Read an integer-valued grid stored as floats (labels, binary masks)."""
    return np.rint(read_tensor(path)).astype(np.int64)


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary mask as an 8-bit PGM (P5), foreground rendered white."""
    mask = np.asarray(mask)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write((np.where(mask > 0, 255, 0).astype(np.uint8)).tobytes())
