"""Versioned binary blob of named arrays, used for model/policy checkpoints.

Layout (little-endian):

    magic  b"LFCK"
    u32    format version (currently 1)
    u32    entry count
    per entry:
        u32 name length, name bytes (utf-8)
        u32 dtype length, dtype string bytes (numpy dtype.str)
        u32 ndim, u64 * ndim dims
        raw array bytes (C order)

The writer emits entries in the order given, so identical inputs produce
identical files.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["save_arrays", "load_arrays", "CheckpointError"]

_MAGIC = b"LFCK"
_VERSION = 1


class CheckpointError(Exception):
    pass


def save_arrays(path, arrays: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            name_b = name.encode("utf-8")
            dtype_b = arr.dtype.str.encode("ascii")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", len(dtype_b)))
            fh.write(dtype_b)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.tobytes())


def load_arrays(path) -> dict:
    arrays: dict = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise CheckpointError(f"{path}: not a lossforge checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (dtype_len,) = struct.unpack("<I", fh.read(4))
            dtype = np.dtype(fh.read(dtype_len).decode("ascii"))
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            n_bytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
            data = fh.read(n_bytes)
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    return arrays
