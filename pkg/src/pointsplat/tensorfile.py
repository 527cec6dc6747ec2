"""Versioned little-endian binary container for named tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"PSTF"
    u32     container version (currently 1)
    u32     number of metadata entries
    per entry:  u32 key length | key utf-8 | u32 value length | value utf-8
    u32     number of tensors
    per tensor: u32 name length | name utf-8 | u8 dtype code | u8 ndim
                | u64 * ndim shape | raw C-order array bytes

dtype codes: 0 = float64, 1 = float32, 2 = int64.  Metadata and tensors
are written in sorted key order, so writing the same content always
produces identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSTF"
VERSION = 1

_DTYPE_CODES = {
    np.dtype(np.float64): 0,
    np.dtype(np.float32): 1,
    np.dtype(np.int64): 2,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class TensorFileError(ValueError):
    pass


def write_tensor_file(path, tensors: dict[str, np.ndarray], meta: dict[str, str]):
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    chunks.append(struct.pack("<I", len(meta)))
    for key in sorted(meta):
        kb = key.encode("utf-8")
        vb = str(meta[key]).encode("utf-8")
        chunks.append(struct.pack("<I", len(kb)) + kb)
        chunks.append(struct.pack("<I", len(vb)) + vb)
    chunks.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _DTYPE_CODES:
            raise TensorFileError(f"tensor {name}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TensorFileError(f"{self.path}: truncated tensor file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_tensor_file(path):
    """Returns (tensors, meta); raises TensorFileError on any malformation."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise TensorFileError(f"{path}: bad magic, not a tensor file")
    version = r.u32()
    if version != VERSION:
        raise TensorFileError(
            f"{path}: unsupported container version {version} (expected {VERSION})"
        )
    meta = {}
    for _ in range(r.u32()):
        key = r.take(r.u32()).decode("utf-8")
        meta[key] = r.take(r.u32()).decode("utf-8")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        code, ndim = struct.unpack("<BB", r.take(2))
        if code not in _CODE_DTYPES:
            raise TensorFileError(f"{path}: tensor {name} has unknown dtype code")
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = r.take(count * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if r.pos != len(r.data):
        raise TensorFileError(f"{path}: trailing bytes after tensor records")
    return tensors, meta
