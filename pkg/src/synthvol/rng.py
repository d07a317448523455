"""Reproducible random substreams keyed by a path of identifiers.

Every random decision in the sample pipeline draws from a dedicated stream
keyed by ``(seed, sample_index, stage, channel, ...)``.  Streams for distinct
keys are statistically independent and their content does not depend on which
worker evaluates them or in which order, so parallel generation is bitwise
reproducible.

String path elements are folded to integers with CRC-32, which is stable
across platforms and Python versions (unlike ``hash()``).
"""

from __future__ import annotations

import zlib

import numpy as np

PathElement = "int | str"


def _fold(element) -> int:
    if isinstance(element, (int, np.integer)):
        if element < 0:
            raise ValueError(f"substream path elements must be non-negative, got {element}")
        return int(element)
    if isinstance(element, str):
        return zlib.crc32(element.encode("utf-8"))
    raise TypeError(f"substream path elements must be int or str, got {type(element).__name__}")


def substream(seed: int, *path) -> np.random.Generator:
    """Return an independent PCG64 generator for (seed, *path).

    Identical arguments always yield an identical stream; different paths
    yield independent streams.
    """
    entropy = [_fold(seed)] + [_fold(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
