"""Single-file binary checkpoint container.

Layout::

    b"SVAESR01"                 magic
    uint32 little-endian        format version
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON: metadata + tensor table
    payload                     raw little-endian tensor bytes, back to back

Floating-point parameters and optimizer moments are stored as float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SVAESR01"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, np.float32),
    "int64": (torch.int64, np.int64),
    "uint8": (torch.uint8, np.uint8),
}


class CheckpointError(OSError):
    pass


def _flatten(prefix, obj, tensors, meta_out):
    """Split nested dicts into a flat tensor table plus JSON-able metadata."""
    if isinstance(obj, torch.Tensor):
        tensors[prefix] = obj
        return {"__tensor__": prefix}
    if isinstance(obj, dict):
        return {str(k): _flatten(f"{prefix}/{k}", v, tensors, meta_out) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return {"__seq__": [_flatten(f"{prefix}/{i}", v, tensors, meta_out) for i, v in enumerate(obj)],
                "__tuple__": isinstance(obj, tuple)}
    return obj


def _unflatten(meta, tensors):
    if isinstance(meta, dict):
        if "__tensor__" in meta:
            return tensors[meta["__tensor__"]]
        if "__seq__" in meta:
            seq = [_unflatten(v, tensors) for v in meta["__seq__"]]
            return tuple(seq) if meta["__tuple__"] else seq
        return {k: _unflatten(v, tensors) for k, v in meta.items()}
    return meta


def _storage_dtype(t: torch.Tensor) -> str:
    if t.is_floating_point():
        return "float32"
    if t.dtype == torch.uint8:
        return "uint8"
    return "int64"


def save(payload: dict, path) -> None:
    """Write a nested dict of tensors / JSON values to ``path`` atomically."""
    tensors: dict[str, torch.Tensor] = {}
    tree = _flatten("", payload, tensors, None)
    table, blobs, offset = [], [], 0
    for name, t in tensors.items():
        dt = _storage_dtype(t)
        arr = t.detach().cpu().to(_DTYPES[dt][0]).contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw),
                      "orig_dtype": str(t.dtype).replace("torch.", "")})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tree": tree, "tensors": table}).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_version(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 4)
    if len(head) < len(MAGIC) + 4 or head[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    return struct.unpack("<I", head[len(MAGIC):])[0]


def load(path) -> dict:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    try:
        version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    start = len(MAGIC) + 12
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    base = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        lo = base + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        np_dtype = np.dtype(_DTYPES[entry["dtype"]][1]).newbyteorder("<")
        arr = np.frombuffer(data[lo:hi], dtype=np_dtype).reshape(entry["shape"])
        t = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        orig = getattr(torch, entry.get("orig_dtype", entry["dtype"]))
        if orig.is_floating_point:
            t = t.to(orig)
        tensors[entry["name"]] = t
    return _unflatten(header["tree"], tensors)
