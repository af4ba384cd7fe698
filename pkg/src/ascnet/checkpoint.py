"""Binary checkpoint container.

Layout::

    b"ASCNETCK" | u32 version | u32 header length | JSON header | blobs...

The header lists every blob by name with dtype, shape and byte offset
(relative to the end of the header). Float blobs are little-endian f32;
integer blobs (video ids, step counters) are little-endian i64.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"ASCNETCK"
VERSION = 1
_DTYPES = {"<f4", "<i8"}


def write_blobs(path: str | os.PathLike, blobs: dict[str, np.ndarray], meta: dict) -> None:
    entries = []
    payload = []
    offset = 0
    for name, arr in blobs.items():
        arr = np.asarray(arr)
        dtype = "<i8" if np.issubdtype(arr.dtype, np.integer) else "<f4"
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "meta": meta, "tensors": entries}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for raw in payload:
            fh.write(raw)
    os.replace(tmp, path)


def read_blobs(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ConfigError(f"{path}: not an ascnet checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    blobs = {}
    for e in header["tensors"]:
        if e["dtype"] not in _DTYPES:
            raise ConfigError(f"{path}: unknown dtype {e['dtype']}")
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])
        blobs[e["name"]] = arr.astype(np.float32 if e["dtype"] == "<f4" else np.int64)
    return header["meta"], blobs
