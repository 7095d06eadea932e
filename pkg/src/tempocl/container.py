"""Single-file container for checkpoints and encoder exports.

Layout (all integers little-endian):

    bytes 0..3    magic "VTCK"
    bytes 4..7    u32 container version (currently 1)
    bytes 8..15   u64 length of the JSON index
    ...           UTF-8 JSON index
    ...           raw array payload

The JSON index holds ``{"meta": <arbitrary JSON>, "arrays": [...]}`` where each
array entry records name, dtype, shape, offset (into the payload) and byte
length. Arrays are stored little-endian in C order. Writes go through a
temp-file rename so a crash never leaves a truncated container behind.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"VTCK"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


def save_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype_name = arr.dtype.name
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype_name} for array {name!r}")
        raw = arr.astype(_DTYPES[dtype_name], copy=False).tobytes()
        entries.append(
            {"name": name, "dtype": dtype_name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    index = json.dumps({"meta": meta, "arrays": entries}).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(index)))
        f.write(index)
        for raw in chunks:
            f.write(raw)
    tmp.replace(path)
    return path


def load_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such file")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        (index_len,) = struct.unpack("<Q", f.read(8))
        index = json.loads(f.read(index_len).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for entry in index["arrays"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload for array {entry['name']!r}")
        buf = payload[start : start + nbytes]
        arr = np.frombuffer(buf, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = np.ascontiguousarray(arr).astype(entry["dtype"], copy=False)
    return index["meta"], arrays
