"""Deterministic named random streams.

Every stochastic component derives its own generator from
(master seed, purpose tag, indices...). Streams are independent of each
other and of execution order, so batches or samples processed in parallel
draw exactly the same numbers as a serial run.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _word(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *path) -> np.random.Generator:
    """Counter-based generator keyed by (seed, *path).

    Path elements may be ints or strings; strings are hashed with sha256 so
    the derivation does not depend on PYTHONHASHSEED.
    """
    words = [_word(seed)] + [_word(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))
