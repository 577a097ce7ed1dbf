"""Portable named-tensor container.

Layout::

    b"PBCKPT01"                      8-byte magic
    uint64 little-endian             header length H
    H bytes                          UTF-8 JSON header
    payload                          raw little-endian float32 tensors

The header is ``{"meta": {...}, "tensors": [{"name", "shape", "dtype": "f32",
"byte_offset"}, ...]}`` with offsets relative to the start of the payload.
Tensors are written in sorted-name order and the JSON is canonical (sorted
keys, no whitespace), so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"PBCKPT01"


def dumps(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "byte_offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":"))
    hb = header.encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint container")
    if len(blob) < 16:
        raise CheckpointError("header_length: truncated")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    if 16 + hlen > len(blob):
        raise CheckpointError(f"header_length: {hlen} exceeds file size")
    try:
        header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"header: not valid JSON ({e})") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise CheckpointError("tensors: missing or not a list")
    payload = memoryview(blob)[16 + hlen :]
    out: dict[str, np.ndarray] = {}
    for i, t in enumerate(header["tensors"]):
        if not isinstance(t, dict):
            raise CheckpointError(f"tensors[{i}]: not an object")
        for key in ("name", "shape", "dtype", "byte_offset"):
            if key not in t:
                raise CheckpointError(f"tensors[{i}].{key}: missing")
        if t["dtype"] != "f32":
            raise CheckpointError(f"tensors[{i}].dtype: unsupported {t['dtype']!r}")
        shape = t["shape"]
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise CheckpointError(f"tensors[{i}].shape: invalid {shape!r}")
        off = t["byte_offset"]
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if not isinstance(off, int) or off < 0 or off + n > len(payload):
            raise CheckpointError(f"tensors[{i}].byte_offset: {off!r} out of range for {t['name']!r}")
        out[t["name"]] = np.frombuffer(payload[off : off + n], dtype="<f4").reshape(shape).astype(np.float32)
    meta = header.get("meta", {})
    if not isinstance(meta, dict):
        raise CheckpointError("meta: not an object")
    return out, meta


def save(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensors_hash(tensors: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(np.asarray(tensors[name], dtype="<f4").tobytes())
    return h.hexdigest()
