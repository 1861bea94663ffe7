"""Binary checkpoint format.

Layout (little-endian)::

    b"KXTI" | u32 version=1 | u32 n | n bytes of JSON ModelConfig
    then per tensor: u32 name_len | name | u32 rank | u32 dims[rank] | f64 payload (row-major)
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import DataError
from .model import ModelConfig, ModelParams, param_shapes

MAGIC = b"KXTI"
VERSION = 1


class CheckpointError(DataError):
    pass


def dumps(params: ModelParams) -> bytes:
    blob = json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(data: bytes) -> ModelParams:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what} ({len(view)} bytes)")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic: not a KXTI checkpoint")
    version, blob_len = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(bytes(take(blob_len, "config")).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad config blob: {exc}") from exc

    shapes = param_shapes(config)
    tensors = {}
    while pos < len(view):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        if name not in shapes or dims != shapes[name]:
            raise CheckpointError(f"unexpected tensor {name} with shape {dims}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name}")
        count = int(np.prod(dims)) if dims else 1
        payload = take(8 * count, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if set(tensors) != set(shapes):
        raise CheckpointError(f"checkpoint is missing tensors {sorted(set(shapes) - set(tensors))}")
    return ModelParams(config, tensors)


def save_checkpoint(params: ModelParams, path) -> None:
    """Atomic: writes a sibling temp file, then renames it over ``path``."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(params))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return loads(fh.read())
