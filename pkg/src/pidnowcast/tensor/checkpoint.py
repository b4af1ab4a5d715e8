"""Single-file checkpoints: JSON manifest followed by concatenated f32le payloads.

Layout::

    b"PNCK" | u16 version | u64 manifest byte length | manifest (UTF-8 JSON) | payload

The manifest holds ``meta`` (free-form model config) and ``params``, a list of
``{"name", "shape", "offset"}`` entries; offsets are bytes from payload start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PNCK"
VERSION = 1
_HEAD = struct.Struct("<4sHQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict, meta: dict | None = None):
    entries, blobs, offset = [], [], 0
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"meta": meta or {}, "params": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Return ``(params, meta)``; params preserve manifest order."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, mlen = _HEAD.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise CheckpointError(f"{path}: not a checkpoint (magic={magic!r}, version={version})")
    manifest = json.loads(raw[_HEAD.size:_HEAD.size + mlen].decode())
    payload = memoryview(raw)[_HEAD.size + mlen:]
    params = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {entry['name']}")
        arr = np.frombuffer(payload[start:start + 4 * count], dtype="<f4")
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return params, manifest["meta"]
