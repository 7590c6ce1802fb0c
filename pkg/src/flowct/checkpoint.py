"""Versioned binary checkpoints: named arrays plus a JSON manifest.

Layout: magic "FCKP" | u32 version | u64 manifest length | manifest JSON
(sorted keys) | concatenated raw little-endian array bytes.  No timestamps
or environment fields, so identical parameters produce identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"FCKP"
VERSION = 1

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<i2": np.dtype("<i2"), "<i8": np.dtype("<i8")}


class CheckpointError(Exception):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        if dt.str not in _DTYPES:
            raise CheckpointError(f"save_checkpoint: unsupported dtype {arr.dtype} for {name!r}")
        raw = arr.astype(dt, copy=False).tobytes()
        entries[name] = {"dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"load_checkpoint: {path}: bad magic {raw[:4]!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointError(f"load_checkpoint: {path}: unsupported version {version}")
    mlen = struct.unpack("<Q", raw[8:16])[0]
    manifest = json.loads(raw[16:16 + mlen])
    base = 16 + mlen
    arrays = {}
    for name, ent in manifest["arrays"].items():
        dt = _DTYPES[ent["dtype"]]
        start = base + ent["offset"]
        end = start + ent["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"load_checkpoint: {path}: truncated payload for {name!r}")
        arrays[name] = np.frombuffer(raw[start:end], dtype=dt).reshape(ent["shape"]).copy()
    return arrays, manifest["meta"]


def params_hash(arrays: dict) -> str:
    """sha256 over names, dtypes, shapes and raw bytes in sorted name order."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(arr.dtype.newbyteorder("<").str.encode())
        h.update(str(tuple(arr.shape)).encode())
        h.update(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()
