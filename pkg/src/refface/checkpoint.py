"""Versioned binary checkpoint files.

Layout (all integers little-endian)::

    bytes 0..7    magic b"REFFACE\\0"
    bytes 8..11   uint32 header length N
    bytes 12..    N bytes of UTF-8 JSON header:
                    {"format": str, "version": int, "meta": {...},
                     "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    then          raw tensor payload; each tensor is C-contiguous, little-endian,
                  at ``offset`` bytes from the start of the payload

The header is serialized with sorted keys, so identical state produces identical
bytes and the file's sha256 is a stable content hash.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"REFFACE\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path: str | Path, fmt: str, state: dict[str, torch.Tensor], meta: dict) -> str:
    """Write ``state`` and return the file's sha256 hex digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = _to_numpy(state[name])
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": fmt, "version": VERSION, "meta": meta, "tensors": entries}, sort_keys=True
    ).encode()
    blob = MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_header(path: str | Path) -> dict:
    blob = Path(path).read_bytes()
    return _parse(blob)[0]


def _parse(blob: bytes) -> tuple[dict, bytes]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a refface checkpoint (bad magic)")
    (n,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12 : 12 + n].decode())
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    return header, blob[12 + n :]


def load_checkpoint(
    path: str | Path, fmt: str | None = None, sha256: str | None = None
) -> tuple[dict[str, torch.Tensor], dict]:
    """Return (state, meta). Verifies the format tag and, if given, the file hash."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if sha256 is not None and hashlib.sha256(blob).hexdigest() != sha256:
        raise CheckpointError(f"sha256 mismatch for {path}")
    header, payload = _parse(blob)
    if fmt is not None and header["format"] != fmt:
        raise CheckpointError(f"{path}: expected format {fmt!r}, found {header['format']!r}")
    state = {}
    for e in header["tensors"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return state, header["meta"]


def state_hash(module: torch.nn.Module) -> str:
    """Content hash of a module's parameters and buffers."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(_to_numpy(t).tobytes())
    return h.hexdigest()
