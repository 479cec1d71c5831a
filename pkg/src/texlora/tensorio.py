"""Binary tensor serialization and the checkpoint container.

Tensor format: little-endian, magic ``TXT0``, rank as u32, dims as u32[],
a u32 dtype tag (0 = float64, 1 = float32), then the raw payload.

A checkpoint is a JSON manifest (parameter names, kinds, shapes, blob
offsets) followed by one tensor blob per entry.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

TENSOR_MAGIC = b"TXT0"
CKPT_MAGIC = b"TXCK"
CKPT_VERSION = 1

_DTYPE_TAGS = {0: np.float64, 1: np.float32}
_TAG_FOR = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


def tensor_to_bytes(values) -> bytes:
    arr = values.array if isinstance(values, Tensor) else np.asarray(values)
    if arr.dtype not in _TAG_FOR:
        arr = arr.astype(np.float64)
    tag = _TAG_FOR[arr.dtype]
    buf = io.BytesIO()
    buf.write(TENSOR_MAGIC)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(struct.pack("<I", tag))
    buf.write(np.ascontiguousarray(arr).astype(f"<f{arr.dtype.itemsize}").tobytes())
    return buf.getvalue()


def tensor_from_bytes(data: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor blob; returns (array, bytes consumed from offset)."""
    if data[offset:offset + 4] != TENSOR_MAGIC:
        raise ValueError("bad tensor magic")
    pos = offset + 4
    (rank,) = struct.unpack_from("<I", data, pos)
    pos += 4
    dims = struct.unpack_from(f"<{rank}I", data, pos)
    pos += 4 * rank
    (tag,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = np.dtype(_DTYPE_TAGS[tag])
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * dtype.itemsize
    arr = np.frombuffer(data, dtype=f"<f{dtype.itemsize}", count=count, offset=pos)
    arr = arr.astype(dtype).reshape(dims)
    return arr, pos + nbytes - offset


def save_tensor(path, values):
    Path(path).write_bytes(tensor_to_bytes(values))


def load_tensor(path) -> Tensor:
    arr, _ = tensor_from_bytes(Path(path).read_bytes())
    return Tensor(arr.astype(np.float64))


def save_checkpoint(path, params: dict, buffers: dict | None = None, config: dict | None = None):
    """Write a manifest + tensor-blob checkpoint file."""
    buffers = buffers or {}
    blobs = io.BytesIO()
    entries = []
    for kind, table in (("param", params), ("buffer", buffers)):
        for name, arr in table.items():
            arr = arr.array if isinstance(arr, Tensor) else np.asarray(arr)
            blob = tensor_to_bytes(arr)
            entries.append({
                "name": name,
                "kind": kind,
                "shape": list(arr.shape),
                "offset": blobs.tell(),
                "nbytes": len(blob),
            })
            blobs.write(blob)
    manifest = json.dumps({"config": config or {}, "entries": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        fh.write(blobs.getvalue())


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    """Read a checkpoint; returns (params, buffers, config)."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", data, 8)
    manifest = json.loads(data[16:16 + mlen].decode())
    blob_base = 16 + mlen
    params, buffers = {}, {}
    for entry in manifest["entries"]:
        arr, _ = tensor_from_bytes(data, blob_base + entry["offset"])
        arr = arr.astype(np.float64)
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{entry['name']}: shape mismatch in checkpoint")
        (params if entry["kind"] == "param" else buffers)[entry["name"]] = arr
    return params, buffers, manifest.get("config", {})
