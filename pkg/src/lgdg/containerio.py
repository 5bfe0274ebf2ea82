"""Versioned binary container: JSON header plus little-endian float64 blobs.

Shared by detector checkpoints, model checkpoints, and latent-graph dumps.
Layout: magic, u32 version, u64 header length, UTF-8 JSON header, payload.
The header lists array names/shapes in payload order and carries a sha256
of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LGC1"
VERSION = 1


class ContainerError(Exception):
    pass


def write_container(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes()
                       for n in names)
    full_header = dict(header)
    full_header["arrays"] = [{"name": n, "shape": list(arrays[n].shape)} for n in names]
    full_header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    hdr = json.dumps(full_header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(hdr)))
        f.write(hdr)
        f.write(payload)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError("bad magic")
    version, hdr_len = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        header = json.loads(raw[16:16 + hdr_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"corrupt header: {e}") from e
    payload = raw[16 + hdr_len:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ContainerError("payload checksum mismatch")
    arrays = {}
    offset = 0
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * 8
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8")
        if arr.size != count:
            raise ContainerError(f"truncated payload at array {spec['name']}")
        arrays[spec["name"]] = arr.reshape(spec["shape"]).copy()
        offset += nbytes
    return header, arrays
