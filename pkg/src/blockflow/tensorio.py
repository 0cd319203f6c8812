"""Raw tensor file format used repo-wide (.sftn).

Layout: magic b"SFTN", u32 rank, u32 dims[rank] (all little-endian), then
row-major float32 little-endian payload. A rank-2 tensor therefore has a
16-byte header.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SFTN"
_MAX_RANK = 8


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        raise FormatError(f"tensor files are float32; got {arr.dtype} for {path}")
    if arr.ndim < 1 or arr.ndim > _MAX_RANK:
        raise FormatError(f"tensor rank {arr.ndim} outside [1, {_MAX_RANK}] for {path}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: missing SFTN magic")
    (rank,) = struct.unpack("<I", blob[4:8])
    if rank < 1 or rank > _MAX_RANK:
        raise FormatError(f"{path}: rank {rank} outside [1, {_MAX_RANK}]")
    header_end = 8 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}I", blob[8:header_end])
    count = int(np.prod(dims, dtype=np.int64))
    expected = header_end + 4 * count
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for shape {dims}, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=header_end, count=count)
    return data.reshape(dims).astype(np.float32, copy=True)
