"""Checkpoint files: magic, version, JSON header, little-endian f32 payload.

Layout:

    bytes 0..3    magic b"EFQC"
    bytes 4..7    format version, uint32 little-endian
    bytes 8..15   header length H, uint64 little-endian
    bytes 16..16+H  UTF-8 JSON header
    rest          array payload, concatenated little-endian float32

Arrays are float32 on the wire except quantization-parameter vectors, which
keep their float64 precision. The header carries the network spec echo, an
ordered array index (name/shape/dtype), free-form metadata, and the SHA-256
of the payload.
Loads verify the magic, refuse versions newer than this writer, and refuse
payloads whose hash does not match. Saving the same state twice produces
byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EFQC"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed, corrupt, or from an unsupported version."""


def save_checkpoint(
    path: str | Path,
    net: dict,
    arrays: dict[str, np.ndarray],
    meta: dict | None = None,
) -> str:
    """Write a checkpoint and return the SHA-256 of the whole file."""
    names = sorted(arrays)

    def wire_dtype(arr):
        return "<f8" if arr.dtype == np.float64 else "<f4"

    payload = b"".join(
        np.ascontiguousarray(arrays[n], dtype=wire_dtype(arrays[n])).tobytes()
        for n in names
    )
    header = {
        "net": net,
        "arrays": [
            {"name": n, "shape": list(arrays[n].shape), "dtype": wire_dtype(arrays[n])}
            for n in names
        ],
        "meta": meta or {},
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = (
        MAGIC
        + struct.pack("<I", VERSION)
        + struct.pack("<Q", len(header_bytes))
        + header_bytes
        + payload
    )
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (net spec dict, arrays, metadata)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointError(f"{path}: too short to be a checkpoint ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version > VERSION:
        raise CheckpointError(
            f"{path}: format version {version} is newer than supported version {VERSION}"
        )
    (header_len,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + header_len:
        raise CheckpointError(f"{path}: truncated header (need {header_len} bytes)")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    payload = raw[16 + header_len :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise CheckpointError(
            f"{path}: payload hash mismatch (file is corrupt): "
            f"stored {header.get('payload_sha256')}, computed {digest}"
        )
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        dtype = entry.get("dtype", "<f4")
        if dtype not in ("<f4", "<f8"):
            raise CheckpointError(f"{path}: unsupported array dtype {dtype!r}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError(
                f"{path}: array {entry['name']!r} overruns payload at byte {16 + header_len + offset}"
            )
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return header["net"], arrays, header.get("meta", {})


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
