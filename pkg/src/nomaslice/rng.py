"""Labelled random substreams derived from one integer seed.

Bulk Monte Carlo draws come in fixed-size chunks. Each chunk has its own
Philox key/counter pair, so chunk ``k`` is the same no matter which worker
produces it or in which order.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["label_id", "substream", "chunk_exponentials"]


def label_id(label: str | int) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(label.encode("utf-8"))


def _seed_sequence(seed: int, labels) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(label_id(x) for x in labels))


def substream(seed: int, *labels: str | int) -> np.random.Generator:
    """General-purpose generator for a labelled purpose (e.g. one placement)."""
    return np.random.Generator(np.random.PCG64(_seed_sequence(seed, labels)))


def chunk_exponentials(seed: int, labels: tuple, chunk_index: int, size: tuple[int, int]) -> np.ndarray:
    """Unit-mean exponential draws for one chunk of a counter-based stream."""
    key = _seed_sequence(seed, labels).generate_state(2, np.uint64)
    bitgen = np.random.Philox(key=key, counter=int(chunk_index) << 192)
    return np.random.Generator(bitgen).standard_exponential(size)
