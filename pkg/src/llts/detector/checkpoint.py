"""Checkpoint file: JSON manifest header + one tensor container per parameter.

Layout:  b"LLTSCKPT" | uint32 LE header length | header JSON (sorted keys)
         | tensor containers in manifest order.

Headers carry the model config, the parameter dtype, and each parameter's
name and shape; everything is timestamp-free, so saving the same model
twice produces identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..tensorops.serialize import tensor_from_stream, tensor_to_bytes
from .config import ModelConfig
from .model import DetectorModel, build_model

MAGIC = b"LLTSCKPT"
VERSION = 1


def checkpoint_bytes(model: DetectorModel) -> bytes:
    named = list(model.named_params())
    header = {
        "version": VERSION,
        "config": model.config.to_dict(),
        "dtype": np.dtype(named[0][1].dtype).name,
        "params": [{"name": n, "shape": list(t.shape)} for n, t in named],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", len(blob)), blob]
    parts.extend(tensor_to_bytes(t) for _, t in named)
    return b"".join(parts)


def save_checkpoint(path, model: DetectorModel) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> DetectorModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        dtype = np.dtype(header["dtype"])
        model = build_model(ModelConfig.from_dict(header["config"]), seed=0, dtype=dtype)
        named = list(model.named_params())
        manifest = header["params"]
        if [m["name"] for m in manifest] != [n for n, _ in named]:
            raise ValueError("checkpoint manifest does not match the configured model")
        for (name, t), meta in zip(named, manifest):
            arr = tensor_from_stream(fh).data
            if list(arr.shape) != meta["shape"] or arr.shape != t.shape:
                raise ValueError(f"parameter {name}: stored shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(dtype)
            t.grad = None
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last parameter")
    return model
