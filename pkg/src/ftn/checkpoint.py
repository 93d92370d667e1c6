"""Checkpoint files.

Layout (little-endian)::

    b"FTNC"  u16 version  u32 config_len  config (UTF-8 JSON)  u32 n_records
    n_records x [u16 name_len, name (UTF-8), u8 rank, rank x u64 extent,
                 float32 payload]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import FTNConfig, FTNModel

MAGIC = b"FTNC"
VERSION = 1
RECORD_OVERHEAD = 2 + 1  # name length (u16) + rank (u8)


def encode(model: FTNModel) -> bytes:
    blob = model.config.to_json().encode("utf-8")
    params = list(model.named_parameters())
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, p in params:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}Q", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def header_size(config_bytes: int) -> int:
    return len(MAGIC) + 2 + 4 + config_bytes + 4


def expected_size(model: FTNModel) -> int:
    """Byte count implied by the layout, for auditing a written file."""
    size = header_size(len(model.config.to_json().encode("utf-8")))
    for name, p in model.named_parameters():
        size += RECORD_OVERHEAD + len(name.encode("utf-8")) + 8 * p.ndim + 4 * p.size
    return size


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}", offset=self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(blob: bytes) -> FTNModel:
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not an FTNC checkpoint (bad magic)", offset=0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})", offset=4)
    (clen,) = r.unpack("<I", "config length")
    start = r.pos
    try:
        config = FTNConfig.from_json(r.take(clen, "config").decode("utf-8"))
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"unreadable config blob: {exc}", offset=start) from exc
    model = FTNModel(config)
    expected = list(model.named_parameters())
    (count,) = r.unpack("<I", "record count")
    if count != len(expected):
        raise CheckpointError(f"checkpoint has {count} parameters, config implies {len(expected)}",
                              offset=r.pos - 4)
    for want_name, p in expected:
        rec_at = r.pos
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        if name != want_name:
            raise CheckpointError(f"expected parameter {want_name!r}, found {name!r}", offset=rec_at)
        (rank,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{rank}Q", f"extents of {name}")
        if tuple(shape) != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: file {tuple(shape)}, "
                                  f"config {p.shape}", offset=rec_at)
        raw = r.take(4 * p.size, f"payload of {name}")
        p.data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(p.shape)
    if r.pos != len(blob):
        raise CheckpointError(f"{len(blob) - r.pos} trailing bytes after last record", offset=r.pos)
    return model


def save(model: FTNModel, path) -> None:
    Path(path).write_bytes(encode(model))


def load(path) -> FTNModel:
    return decode(Path(path).read_bytes())
