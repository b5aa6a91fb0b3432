"""Parameter checkpoint files.

Layout::

    b"DCKPT1\\n"                       magic
    uint64 little-endian               byte length of the manifest
    manifest (UTF-8 JSON)              {"tensors": [{"name", "shape"}, ...], "meta": {...}}
    float64 little-endian buffers      concatenated in manifest order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DCKPT1\n"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.asarray(getattr(v, "data", v), dtype="<f8") for k, v in tensors.items()}
    manifest = {
        "tensors": [{"name": k, "shape": list(a.shape)} for k, a in arrays.items()],
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    manifest = json.loads(raw[off:off + n].decode("utf-8"))
    off += n
    out: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        out[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return out, manifest.get("meta", {})
