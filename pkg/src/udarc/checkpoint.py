"""Byte-stable checkpoint container.

Layout (all integers little-endian)::

    b"UDARCKPT"                 8-byte magic
    u32 format version
    u64 header length H
    H bytes of UTF-8 JSON       config, group manifest, array index, metadata
    float64 array payload       arrays back to back in index order
    32-byte SHA-256             digest of every preceding byte

The header is serialized with sorted keys and fixed separators, so identical
parameters and metadata always give identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"UDARCKPT"
VERSION = 1
_DIGEST = 32


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)


def dumps(ckpt: Checkpoint) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = {"config": ckpt.config, "manifest": ckpt.manifest, "meta": ckpt.meta, "arrays": index,
              "payload_bytes": offset}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def loads(blob: bytes) -> Checkpoint:
    fixed = len(MAGIC) + 12
    if len(blob) < fixed + _DIGEST or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    version, hlen = struct.unpack("<IQ", blob[len(MAGIC):fixed])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint is truncated or corrupt (digest mismatch)")
    try:
        header = json.loads(body[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    payload = body[fixed + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("checkpoint payload size does not match its header")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape).astype(np.float64)
    return Checkpoint(header["config"], arrays, header["meta"], header["manifest"])


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
