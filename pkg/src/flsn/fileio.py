"""FLT1 tensor files and 16-bit PGM conversion.

FLT1 layout: ``b"FLT1"``, four little-endian uint32 dims (n, c, h, w), one
dtype byte (0 = float32, 1 = float64), then the raw little-endian values in
row-major order.
"""
from __future__ import annotations

import os
import re
import struct

import numpy as np

from .errors import LoadError
from .tensor import Tensor

MAGIC = b"FLT1"
_HEADER = struct.Struct("<4sIIIIB")
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _as_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 4:
        raise ValueError(f"FLT1 stores rank-4 arrays, got shape {arr.shape}")
    dt = arr.dtype.newbyteorder("<")
    if dt not in _TAGS:
        raise ValueError(f"FLT1 stores float32 or float64, got {arr.dtype}")
    return arr.astype(dt, copy=False)


def encode(x) -> bytes:
    arr = _as_array(x)
    return _HEADER.pack(MAGIC, *arr.shape, _TAGS[arr.dtype]) + np.ascontiguousarray(arr).tobytes()


def decode(buf: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Parse one FLT1 blob starting at ``offset``; returns the array and the offset after it."""
    if len(buf) - offset < _HEADER.size:
        raise LoadError(f"{source}: truncated FLT1 header")
    magic, n, c, h, w, tag = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise LoadError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if tag not in _DTYPES:
        raise LoadError(f"{source}: unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    count = n * c * h * w
    start = offset + _HEADER.size
    end = start + count * dt.itemsize
    if end > len(buf):
        raise LoadError(f"{source}: payload truncated ({len(buf) - start} of {end - start} bytes)")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=start).reshape(n, c, h, w).copy()
    return arr, end


def write_tensor(path: str | os.PathLike, x) -> None:
    try:
        with open(path, "wb") as f:
            f.write(encode(x))
    except OSError as e:
        raise LoadError(f"cannot write {path}: {e}") from e


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise LoadError(f"cannot read {path}: {e}") from e
    arr, end = decode(buf, 0, str(path))
    if end != len(buf):
        raise LoadError(f"{path}: {len(buf) - end} trailing bytes after FLT1 payload")
    return arr


def write_pgm16(path: str | os.PathLike, x) -> None:
    arr = _as_array(x)
    if arr.shape[:2] != (1, 1):
        raise ValueError(f"PGM export needs a single 1x1xHxW image, got {arr.shape}")
    img = np.clip(np.rint(arr[0, 0]), 0, 65535).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm16(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    m = re.match(rb"P5\s+(?:#.*\s+)*(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if not m:
        raise LoadError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    dt = ">u2" if maxval > 255 else "u1"
    img = np.frombuffer(buf, dtype=dt, count=w * h, offset=m.end()).reshape(h, w)
    return img.astype(np.float32)[None, None]
