"""PXB1 binary array file format.

Layout: magic bytes ``50 58 42 31`` ("PXB1"), little-endian u32 dtype code
(1 = float64), u32 rank, rank x u64 dims, then the row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PXB1"
DTYPE_F64 = 1


def write_pxb(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    if arr.ndim < 1 or arr.ndim > 3:
        raise FormatError(f"PXB1 supports rank 1-3, got rank {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", DTYPE_F64, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_pxb(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r} at offset 0, expected {MAGIC!r}")
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header at offset {len(data)}")
    dtype_code, rank = struct.unpack_from("<II", data, 4)
    if dtype_code != DTYPE_F64:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code} at offset 4")
    if rank < 1 or rank > 3:
        raise FormatError(f"{path}: unsupported rank {rank} at offset 8")
    dims_end = 12 + 8 * rank
    if len(data) < dims_end:
        raise FormatError(f"{path}: truncated dims at offset {len(data)}")
    dims = struct.unpack_from(f"<{rank}Q", data, 12)
    count = int(np.prod(dims))
    expected = dims_end + 8 * count
    if len(data) < expected:
        raise FormatError(
            f"{path}: truncated payload at offset {len(data)}, expected {expected} bytes"
        )
    flat = np.frombuffer(data, dtype="<f8", count=count, offset=dims_end)
    return flat.reshape(dims).astype(np.float64, copy=True)


def read_matrix(path) -> np.ndarray:
    arr = read_pxb(path)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected rank-2 array, got rank {arr.ndim}")
    return arr
