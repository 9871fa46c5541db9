"""Flat parameter checkpoints.

Layout: ``b"DPCK"`` magic, little-endian uint32 header length, a UTF-8 JSON
header ``{"version", "dtype", "meta", "params": [{"name", "shape", "offset"}]}``
and then the raw little-endian float64 buffers back to back. Nothing
time-dependent is written, so identical weights give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPCK"
VERSION = 1
_LE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, offset = [], 0
    blobs = []
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype=_LE)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"version": VERSION, "dtype": "<f8", "meta": meta or {}, "params": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen])
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 8 + hlen
    out = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        buf = raw[start : start + n * 8]
        if len(buf) != n * 8:
            raise CheckpointError(f"{path}: truncated buffer for {e['name']}")
        out[e["name"]] = np.frombuffer(buf, dtype=_LE).reshape(e["shape"]).astype(np.float64)
    return out, header["meta"]
