"""Flat on-disk container for named float64 arrays.

A checkpoint directory holds `data.bin` (the arrays concatenated as raw
little-endian float64) and `index.json` mapping each name to its shape and
byte offset. Arrays are written in sorted name order so identical states
produce identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

INDEX_NAME = "index.json"
DATA_NAME = "data.bin"


class CheckpointError(RuntimeError):
    pass


def save_arrays(arrays: dict[str, np.ndarray], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"byte_order": "little", "dtype": "float64", "arrays": {}}
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        index["arrays"][name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    (directory / DATA_NAME).write_bytes(b"".join(chunks))
    (directory / INDEX_NAME).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return directory


def load_arrays(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    index_path = directory / INDEX_NAME
    data_path = directory / DATA_NAME
    if not index_path.exists():
        raise CheckpointError(f"missing checkpoint index {index_path}")
    if not data_path.exists():
        raise CheckpointError(f"missing checkpoint data {data_path}")
    index = json.loads(index_path.read_text())
    blob = data_path.read_bytes()
    out = {}
    for name, meta in index["arrays"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise CheckpointError(f"checkpoint data truncated for array {name!r} in {data_path}")
        out[name] = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).copy()
    return out
