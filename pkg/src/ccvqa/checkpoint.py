"""Versioned binary checkpoint container.

Layout::

    b"CCVQACKP"            8-byte magic
    uint32 LE              format version
    uint64 LE              header length in bytes
    header                 UTF-8 JSON: {"tensors": [{name, shape, dtype, offset, nbytes}], "meta": {...}}
    payload                raw little-endian tensor bytes, offsets relative to payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CCVQACKP"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "u1", "bool": "|b1"}


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        kind = arr.dtype.name
        if kind not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": kind, "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "meta": meta or {}}).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version > FORMAT_VERSION:
        raise ValueError(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    payload = memoryview(raw)[start + hlen :]
    tensors = {}
    for e in header["tensors"]:
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).astype(e["dtype"]).reshape(e["shape"])
        tensors[e["name"]] = arr
    return tensors, header["meta"]
