"""Checkpoint serialization.

Layout (all integers little-endian):

    bytes 0..3    magic b"CGCK"
    bytes 4..7    format version, uint32 (currently 1)
    bytes 8..15   manifest length in bytes, uint64
    manifest      UTF-8 JSON: {"format_version", "hyperparameters",
                  "rng_seed", "step_count", "params": [{"name", "shape"}]}
    payload       for each manifest entry, row-major float64 little-endian

The manifest's param order is the payload order, so the file is portable
across implementations that honor this layout.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParameterStore

MAGIC = b"CGCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed or mismatched checkpoint files."""


def save_checkpoint(
    path: str | Path,
    store: ParameterStore,
    hyperparameters: dict,
    rng_seed: int,
):
    path = Path(path)
    manifest = {
        "format_version": FORMAT_VERSION,
        "hyperparameters": hyperparameters,
        "rng_seed": int(rng_seed),
        "step_count": int(store.step_count),
        "params": [
            {"name": name, "shape": list(t.data.shape)} for name, t in store.params.items()
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, t in store.params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    mlen = struct.unpack("<Q", raw[8:16])[0]
    if len(raw) < 16 + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))

    store = ParameterStore()
    offset = 16 + mlen
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        chunk = raw[offset : offset + nbytes]
        if len(chunk) < nbytes:
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        store.add(entry["name"], arr)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    store.step_count = int(manifest.get("step_count", 0))
    return store, manifest
