"""Labeled random streams derived from one integer seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label) -> list[int]:
    if isinstance(label, (int, np.integer)):
        return [int(label) & 0xFFFFFFFF, (int(label) >> 32) & 0xFFFFFFFF]
    digest = hashlib.sha256(str(label).encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def derive_rng(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``.

    Same arguments give the same stream regardless of call order, so serial
    and parallel callers agree.
    """
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for label in labels:
        words.extend(_label_words(label))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
