"""Binary container for 5-d tensors.

Layout: magic ``DMSN``, format version (u32 LE), dtype code (u32 LE; 0 = f32,
1 = f64), five u32 LE extents (n, c, t, h, w), then the payload row-major in
little-endian IEEE floats.  Round trips are bit-exact.
"""

from __future__ import annotations

import io
import struct

import numpy as np

MAGIC = b"DMSN"
VERSION = 1
_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_HEADER = struct.Struct("<4sII5I")


class TensorFileError(ValueError):
    """Malformed or truncated tensor container."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    if arr.ndim != 5:
        raise TensorFileError(f"container holds 5-d tensors, got shape {arr.shape}")
    dtype = np.dtype(arr.dtype)
    if dtype not in _CODE_BY_KIND:
        raise TensorFileError(f"unsupported dtype {dtype}; use float32 or float64")
    code = _CODE_BY_KIND[dtype]
    header = _HEADER.pack(MAGIC, VERSION, code, *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_BY_CODE[code]).tobytes()
    return header + payload


def tensor_from_stream(stream: io.BufferedIOBase) -> np.ndarray:
    raw = stream.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise TensorFileError("truncated header")
    magic, version, code, n, c, t, h, w = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise TensorFileError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"unsupported format version {version}")
    if code not in _DTYPE_BY_CODE:
        raise TensorFileError(f"unknown dtype code {code}")
    dtype = _DTYPE_BY_CODE[code]
    count = n * c * t * h * w
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise TensorFileError("truncated payload")
    data = np.frombuffer(payload, dtype=dtype).reshape(n, c, t, h, w)
    return data.astype(dtype.newbyteorder("="), copy=True)


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    return tensor_from_stream(io.BytesIO(blob))


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_stream(fh)
