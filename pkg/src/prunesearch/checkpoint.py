"""Versioned named-array checkpoint container.

Layout: 4-byte magic, uint32 version, uint64 header length, a UTF-8 JSON
header (free-form ``meta`` plus an array index), then the arrays' raw bytes,
every value an explicit little-endian 8-byte float. Loading returns exactly
what was saved, bit for bit.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"PSCK"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write atomically (temp file + rename), so failures leave no partial file."""
    index = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d,
        # and tobytes() serializes C-order regardless of memory layout
        arr = np.asarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": index}).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return header["meta"], arrays


def rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
