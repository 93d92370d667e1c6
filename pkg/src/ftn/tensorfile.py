"""Binary tensor exchange files.

Layout: ``b"FTNT"``, u8 version (1), u8 rank, ``rank`` little-endian u64
extents, then the little-endian float32 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"FTNT"
VERSION = 1


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise DataError(f"rank {arr.ndim} does not fit the u8 rank field")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise DataError("not an FTNT tensor file (bad magic)")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != VERSION:
        raise DataError(f"unsupported FTNT version {version}")
    offset = 6
    if len(blob) < offset + 8 * rank:
        raise DataError(f"truncated FTNT header at byte {len(blob)}")
    shape = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    count = int(np.prod(shape, dtype=np.int64))
    expected = offset + 4 * count
    if len(blob) != expected:
        raise DataError(f"FTNT payload size mismatch: file has {len(blob)} bytes, "
                        f"shape {tuple(shape)} needs {expected}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return data.astype(np.float32).reshape(shape)


def save_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
