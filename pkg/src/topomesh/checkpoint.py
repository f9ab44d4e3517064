"""Versioned binary container of named float64 arrays.

Layout (all integers little-endian int64, all floats little-endian
float64):

    magic     8 bytes  b"TMCKPT01" (version is part of the magic)
    count     int64    number of entries
    entry*    repeated:
        name_len  int64
        name      utf-8 bytes
        ndim      int64
        dims      int64 * ndim
        data      float64 * prod(dims), row-major

Entries are written in sorted name order so identical dictionaries give
byte-identical files.  Scalar configuration values travel as arrays under
reserved "config." names.
"""

import struct

import numpy as np

MAGIC = b"TMCKPT01"


class CheckpointError(Exception):
    """Malformed or truncated checkpoint file."""


def save_checkpoint(arrays: dict, path) -> None:
    """Write a name -> ndarray mapping; arrays are stored as float64."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<q", len(arrays)))
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<q", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<q", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<q", dim))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_checkpoint(path) -> dict:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:8]!r}, expected {MAGIC!r}")
    offset = 8

    def take(count):
        nonlocal offset
        if offset + count > len(blob):
            raise CheckpointError("truncated checkpoint")
        piece = blob[offset : offset + count]
        offset += count
        return piece

    def take_i64():
        return struct.unpack("<q", take(8))[0]

    n_entries = take_i64()
    if n_entries < 0:
        raise CheckpointError(f"negative entry count {n_entries}")
    arrays = {}
    for _ in range(n_entries):
        name_len = take_i64()
        if name_len < 0:
            raise CheckpointError("negative name length")
        name = take(name_len).decode("utf-8")
        ndim = take_i64()
        if ndim < 0:
            raise CheckpointError(f"negative rank for entry {name!r}")
        dims = [take_i64() for _ in range(ndim)]
        if any(d < 0 for d in dims):
            raise CheckpointError(f"negative dimension for entry {name!r}")
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(size * 8), dtype="<f8").reshape(dims)
        arrays[name] = data.astype(np.float64).copy()
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes")
    return arrays
