"""Seeded random streams derived from one master seed by stable labels.

Streams use the counter-based Philox bit generator.  A label path such as
``("panel", 7)`` always maps to the same stream, so adding or removing other
consumers never shifts the numbers a given consumer sees.
"""

import zlib

import numpy as np

__all__ = ["stream", "label_key"]


def label_key(label):
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed, *labels):
    """Independent generator for ``seed`` and a path of labels."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence(seed, spawn_key=tuple(label_key(x) for x in labels))
    return np.random.Generator(np.random.Philox(ss))
