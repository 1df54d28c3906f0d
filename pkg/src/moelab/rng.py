"""Seeded, counter-based random streams.

Every random draw in the package goes through :func:`substream`, so a root
seed plus a stream index fully determine the numbers produced. Streams are
Philox generators sharing a key derived from the root seed and differing in
the high word of the 256-bit counter, so two streams can never overlap in
practice and chunk ``j`` of a Monte-Carlo run sees the same numbers no matter
how chunks are spread over workers.
"""

from __future__ import annotations

import numpy as np

__all__ = ["substream", "stream_key"]


def stream_key(seed: int, *tags: int) -> np.ndarray:
    """128-bit Philox key for ``seed`` (and optional integer tags)."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence([int(seed), *[int(t) for t in tags]])
    return ss.generate_state(2, dtype=np.uint64)


def substream(seed: int, index: int = 0, *tags: int) -> np.random.Generator:
    """Generator for substream ``index`` of root ``seed``.

    ``tags`` separate unrelated consumers of the same root seed (for example
    the sampler and the noise source of one experiment).
    """
    if index < 0:
        raise ValueError(f"stream index must be non-negative, got {index}")
    counter = np.array([0, 0, 0, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=stream_key(seed, *tags)))
