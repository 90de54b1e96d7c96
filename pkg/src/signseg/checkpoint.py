"""Binary checkpoint container.

Layout::

    b"SGCK" | uint32 LE version | uint64 LE manifest length | manifest (UTF-8 JSON)
    | raw little-endian float64 blocks, in manifest order

The manifest lists parameter names and shapes, the dtype tag ``"f64"`` and
free-form metadata (model configuration, training stage).  JSON is written
with sorted keys and fixed separators so that a load/save round trip is
byte-exact.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGCK"
FORMAT_VERSION = 1
DTYPE_TAG = "f64"


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(params: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    blocks = []
    for name, value in sorted(params.items()):
        arr = np.asarray(value, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape)})
        blocks.append(np.ascontiguousarray(arr).tobytes())
    manifest = _dumps({
        "format_version": FORMAT_VERSION,
        "dtype": DTYPE_TAG,
        "meta": meta or {},
        "params": entries,
    })
    header = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(manifest))
    return header + manifest + b"".join(blocks)


def from_bytes(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, mlen = struct.unpack_from("<IQ", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    if manifest.get("dtype") != DTYPE_TAG:
        raise CheckpointError(f"unsupported dtype tag {manifest.get('dtype')!r}")
    offset = start + mlen
    params: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise CheckpointError(f"truncated data for {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError("trailing bytes after last parameter block")
    return params, manifest["meta"]


def save(path, params: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a checkpoint and return its SHA-256 hex digest."""
    raw = to_bytes(params, meta)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return from_bytes(Path(path).read_bytes())


def checksum(params: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(to_bytes(params)).hexdigest()
