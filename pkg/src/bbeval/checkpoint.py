"""Weight checkpoint container.

Layout: magic string "BBGW1", then one record per tensor in insertion
order: name length (little-endian uint64), name bytes (utf-8), rank
(uint64), extents (uint64 each), then raw little-endian float32 values.
Round-trips are bit-exact.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .exceptions import FormatError

MAGIC = b"BBGW1"


def save_tensors(tensors: dict, path):
    """Write an ordered name -> array mapping; values are stored as float32."""
    blob = bytearray(MAGIC)
    for name, arr in tensors.items():
        data = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        nb = name.encode("utf-8")
        blob += struct.pack("<Q", len(nb))
        blob += nb
        blob += struct.pack("<Q", data.ndim)
        for extent in data.shape:
            blob += struct.pack("<Q", extent)
        blob += data.tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_tensors(path) -> dict:
    """Read a checkpoint back into an ordered name -> float32 array mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"checkpoint: bad magic, expected {MAGIC!r}", offset=0)
    out = {}
    at = len(MAGIC)

    def read_u64(why):
        nonlocal at
        if at + 8 > len(blob):
            raise FormatError(f"checkpoint: truncated while reading {why}", offset=at)
        val = struct.unpack_from("<Q", blob, at)[0]
        at += 8
        return val

    while at < len(blob):
        name_len = read_u64("name length")
        if at + name_len > len(blob):
            raise FormatError("checkpoint: truncated name", offset=at)
        name = blob[at:at + name_len].decode("utf-8")
        at += name_len
        rank = read_u64("rank")
        shape = tuple(read_u64(f"extent {i}") for i in range(rank))
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if at + nbytes > len(blob):
            raise FormatError(f"checkpoint: truncated tensor '{name}', "
                              f"expected {nbytes} payload bytes", offset=at)
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=at).reshape(shape)
        at += nbytes
        out[name] = arr.copy()
    return out
