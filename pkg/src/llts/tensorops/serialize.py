"""Flat binary tensor container: magic, rank, extents, float64 payload.

Layout (all integers little-endian uint32, payload little-endian float64):

    b"LLTS" | rank | extent_0 .. extent_{rank-1} | values (C order)

The format is deliberately timestamp-free so identical tensors always
serialize to identical bytes.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .tensor import Tensor, check_finite

MAGIC = b"LLTS"


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    # note: asarray keeps rank 0 intact where ascontiguousarray would promote to 1-D
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64, order="C")
    check_finite(arr, "serialized tensor")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def tensor_from_stream(stream: io.BufferedIOBase) -> Tensor:
    magic = stream.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor container magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", stream.read(4))
    if rank > 8:
        raise ValueError(f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", stream.read(4 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError(f"truncated tensor payload: wanted {8 * count} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    check_finite(arr, "deserialized tensor")
    return Tensor(arr)


def tensor_from_bytes(blob: bytes) -> Tensor:
    return tensor_from_stream(io.BytesIO(blob))


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        out = tensor_from_stream(fh)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after tensor payload")
    return out
