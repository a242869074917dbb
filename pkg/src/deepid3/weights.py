"""Binary named-tensor files.

Layout (all integers little-endian)::

    b"DID3"                 magic
    u32                     format version (1)
    u32                     tensor count
    per tensor:
        u32                 name length in bytes
        bytes               UTF-8 name
        u32                 rank
        u64 * rank          extents
        f32 * prod(extents) values, row-major
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"DID3"
VERSION = 1


def dumps_weights(tensors) -> bytes:
    """Serialize ``name -> array`` (insertion order) to bytes."""
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def loads_weights(data: bytes) -> dict:
    """Parse bytes written by :func:`dumps_weights`. Values come back as float64."""
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated file while reading {what}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a DID3 weight file", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        start = pos
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start) from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(4 * size, f"values of '{name}'"), dtype="<f4")
        tensors[name] = values.astype(np.float64).reshape(shape)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last tensor", pos)
    return tensors


def save_weights(path, tensors) -> None:
    data = dumps_weights(tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_weights(path) -> dict:
    with open(path, "rb") as fh:
        return loads_weights(fh.read())
