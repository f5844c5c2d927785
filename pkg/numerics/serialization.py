"""
Manifest-plus-blob tensor storage, used for checkpoints and regression fixtures.

A stored directory contains:

- ``manifest.json``: a list of ``{"name", "shape", "offset"}`` records, offset
  counted in float64 elements from the start of the blob.
- ``weights.bin``: every tensor's data, row-major, little-endian float64,
  concatenated in manifest order.
"""

import json
import logging
import os
from collections.abc import Mapping

import numpy as np

from numerics.tensor_ops import Tensor, as_tensor

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
BLOB_FILE = "weights.bin"
_LITTLE_F64 = np.dtype("<f8")


def save_tensors(directory: str, tensors: Mapping[str, Tensor]) -> None:
    """Writes ``tensors`` (in iteration order) to ``directory``, creating it if needed."""
    os.makedirs(directory, exist_ok=True)
    manifest = []
    offset = 0
    with open(os.path.join(directory, BLOB_FILE), "wb") as blob:
        for name, value in tensors.items():
            value = as_tensor(value)
            manifest.append({"name": name, "shape": list(value.shape), "offset": offset})
            blob.write(value.astype(_LITTLE_F64).tobytes(order="C"))
            offset += value.size
    with open(os.path.join(directory, MANIFEST_FILE), "w") as f:
        json.dump(manifest, f, indent=2)
    logger.debug(f"Saved {len(manifest)} tensors ({offset} values) to {directory}")


def load_tensors(directory: str) -> dict[str, Tensor]:
    """Reads a directory written by :func:`save_tensors`, preserving manifest order."""
    with open(os.path.join(directory, MANIFEST_FILE)) as f:
        manifest = json.load(f)
    data = np.fromfile(os.path.join(directory, BLOB_FILE), dtype=_LITTLE_F64).astype(np.float64)
    tensors = {}
    for record in manifest:
        size = int(np.prod(record["shape"], dtype=np.int64))
        start = record["offset"]
        if start + size > data.size:
            raise ValueError(f"Tensor '{record['name']}' runs past the end of {BLOB_FILE}")
        tensors[record["name"]] = data[start:start + size].reshape(record["shape"]).copy()
    return tensors
