"""UPSV checkpoint files.

Layout: magic ``UPSV``, u32 format version, then per array: u32 name
length, name bytes (utf-8), u32 rank, u32 extents, little-endian float32
values.  Round-trips are bit-exact for float32 state.
"""

import struct

import numpy as np

MAGIC = b"UPSV"
VERSION = 1


class CheckpointError(Exception):
    pass


def write_checkpoint(path, arrays):
    """arrays: mapping name -> ndarray; written in iteration order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path):
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            payload = fh.read(4 * count)
            if len(payload) < 4 * count:
                raise CheckpointError(f"{path}: truncated values for {name}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return out
