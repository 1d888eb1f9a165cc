"""Binary array files with a readable JSON header.

Layout::

    SGVIT-CKPT 1\\n
    {"meta": {...}, "tensors": [{"name", "shape", "offset", "nbytes"}, ...], "data_bytes": n}\\n
    <raw little-endian float32 bytes>

Offsets are relative to the first byte after the header line.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"SGVIT-CKPT 1\n"


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"meta": meta or {}, "tensors": entries, "data_bytes": offset}
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(line)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a file written by :func:`save_arrays`; nothing is returned on any error."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic at offset 0")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: header line not terminated (offset {len(MAGIC)})")
    try:
        header = json.loads(blob[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header at offset {len(MAGIC) + exc.pos}") from exc
    base = end + 1
    have = len(blob) - base
    if have != header["data_bytes"]:
        kind = "truncated" if have < header["data_bytes"] else "trailing bytes"
        raise CheckpointError(
            f"{path}: {kind}: data section has {have} bytes, header declares "
            f"{header['data_bytes']} (file offset {len(blob)})")
    arrays = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["nbytes"] != 4 * n or e["offset"] + e["nbytes"] > have:
            raise CheckpointError(f"{path}: tensor {e['name']} inconsistent at offset {start}")
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=start).reshape(e["shape"]).astype(np.float32)
    return arrays, header["meta"]
