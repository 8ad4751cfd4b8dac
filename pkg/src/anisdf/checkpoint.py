"""Binary tensor container used for checkpoints.

Layout (all integers little-endian)::

    bytes 0..8    magic b"ANISDFCK"
    u32           format version (1)
    u64           header length H
    H bytes       UTF-8 JSON header
    payload       float64 little-endian values, tensors back to back
    32 bytes      SHA-256 of everything above

The header holds ``{"meta": {...}, "tensors": [{"id", "shape", "offset", "count"}]}``
where ``offset``/``count`` are in float64 elements from the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"ANISDFCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ChecksumError(CheckpointError):
    pass


def write_container(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    path = Path(path)
    entries = []
    offset = 0
    chunks = []
    for k in sorted(tensors):
        a = np.ascontiguousarray(tensors[k], dtype="<f8")
        entries.append({"id": k, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        offset += a.size
        chunks.append(a.tobytes())
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(body + digest)
        tmp.replace(path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an anisdf checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch (file corrupt or tampered)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hlen].decode())
    payload = np.frombuffer(body, dtype="<f8", offset=start + hlen)
    tensors = {}
    for e in header["tensors"]:
        a = payload[e["offset"] : e["offset"] + e["count"]]
        if a.size != e["count"]:
            raise CheckpointError(f"{path}: truncated tensor {e['id']}")
        tensors[e["id"]] = a.reshape(e["shape"]).astype(np.float64)
    return tensors, header["meta"]
