"""
Deterministic random streams.

All randomness goes through ``numpy.random.Generator`` backed by the
counter-based Philox bit generator. A stream is identified by a root seed
plus a path of labels (``make_rng(7, "train", 12)``), so independent trials,
arms and steps draw from independent streams that do not depend on the
order in which they are created. Philox and SeedSequence are specified
bit-for-bit by numpy, which makes the sequences identical across platforms.
"""

import zlib

import numpy as np

Rng = np.random.Generator


def _path_key(label: int | str) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    if label < 0:
        raise ValueError(f"Stream labels must be non-negative, got {label}")
    return int(label)


def make_rng(seed: int, *path: int | str) -> Rng:
    """Returns the Philox stream for ``seed`` and the optional label path."""
    entropy = [int(seed), *(_path_key(label) for label in path)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
