"""HCTF binary tensor files.

Layout (little-endian): magic ``HCTF``, version u8 = 1, dtype u8 (0 = f32,
1 = f64), ndim u32, ndim x u64 dims, then the row-major payload.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from ..errors import FileError, FormatError

MAGIC = b"HCTF"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_HEADER = struct.Struct("<4sBBI")


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        code = 0
    elif arr.dtype == np.float64:
        code = 1
    else:
        raise FormatError(f"unsupported dtype {arr.dtype}", field="dtype")
    head = _HEADER.pack(MAGIC, VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes(order="C")
    return head + dims + payload


def decode(buf: bytes, path=None) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", path=path, field="header")
    magic, version, code, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path=path, field="magic")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", path=path, field="version")
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}", path=path, field="dtype")
    off = _HEADER.size
    if len(buf) < off + 8 * ndim:
        raise FormatError("truncated dims", path=path, field="dims")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dt = _CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    need = off + count * dt.itemsize
    if len(buf) != need:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {need - off}", path=path, field="payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def save(path, arr) -> None:
    data = encode(arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else arr)
    try:
        os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise FileError(f"cannot write {path}: {exc}") from exc


def load(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FileError(f"cannot read {path}: {exc}") from exc
    return decode(buf, path=path)
