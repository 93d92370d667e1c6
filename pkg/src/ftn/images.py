"""Binary PPM (P6) and PGM (P5) images, 8-bit only."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DataError

_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s+(?:#[^\n]*\s+)*(\d+)\s")


def _parse(blob: bytes, magic: bytes, channels: int) -> np.ndarray:
    m = _HEADER.match(blob)
    if not m or m.group(1) != magic:
        raise DataError(f"not a binary {magic.decode()} image")
    w, h, maxval = (int(m.group(i)) for i in (2, 3, 4))
    if maxval != 255:
        raise DataError(f"only 8-bit images are supported (maxval {maxval})")
    start = m.end()
    need = w * h * channels
    if len(blob) - start < need:
        raise DataError(f"image payload truncated: need {need} bytes, have {len(blob) - start}")
    arr = np.frombuffer(blob, dtype=np.uint8, count=need, offset=start)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def read_ppm(path) -> np.ndarray:
    """RGB image as float32 ``[H, W, 3]`` in [0, 1]."""
    return _parse(Path(path).read_bytes(), b"P6", 3).astype(np.float32) / 255.0


def write_ppm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"PPM needs [H, W, 3], got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path) -> np.ndarray:
    return _parse(Path(path).read_bytes(), b"P5", 1)


def write_pgm(path, labels) -> None:
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise DataError(f"PGM needs [H, W], got {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() > 255):
        raise DataError("label values must fit in 8 bits")
    h, w = lab.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + lab.astype(np.uint8).tobytes())
