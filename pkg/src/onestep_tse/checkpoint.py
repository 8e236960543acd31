"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"TSECKPT1"
    8       4     uint32 format version (1)
    12      4     uint32 reserved, 0
    16      8     uint64 manifest length M in bytes
    24      M     UTF-8 JSON manifest
    24+M    ...   payload: raw little-endian tensor bytes, concatenated

The manifest is ``{"version": 1, "meta": {...}, "tensors": [...]}`` where
each tensor entry is ``{"name", "shape", "dtype", "offset", "nbytes"}`` and
``offset`` counts from the start of the payload. Entries appear in the order
they were given, which for models is ``named_parameters`` / ``state_dict``
order. Supported dtypes: float32, float64, int64.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError

MAGIC = b"TSECKPT1"
VERSION = 1
_PREFIX = struct.Struct("<8sIIQ")
_DTYPES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64"}
_NP = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save(path, tensors, meta=None) -> str:
    """Write ``tensors`` (name -> tensor) and JSON-able ``meta``; returns the file's sha256."""
    entries, blobs, offset = [], [], 0
    for name, tensor in tensors.items():
        tensor = torch.as_tensor(tensor).detach().cpu()
        if tensor.dtype not in _DTYPES:
            raise ValidationError(f"{name}: unsupported dtype {tensor.dtype}")
        dtype = _DTYPES[tensor.dtype]
        blob = np.ascontiguousarray(tensor.numpy(), dtype=_NP[dtype]).tobytes()
        entries.append({"name": name, "shape": list(tensor.shape), "dtype": dtype, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"version": VERSION, "meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    data = _PREFIX.pack(MAGIC, VERSION, 0, len(manifest)) + manifest + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    if not Path(path).is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, _, mlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    try:
        manifest = json.loads(raw[_PREFIX.size : _PREFIX.size + mlen])
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValidationError(f"{path}: corrupt manifest") from None
    base = _PREFIX.size + mlen
    tensors = OrderedDict()
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        buf = raw[start : start + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise ValidationError(f"{path}: payload for {entry['name']} is truncated")
        arr = np.frombuffer(buf, dtype=_NP[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
    return tensors, manifest["meta"]


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
