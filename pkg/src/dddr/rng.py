"""Counter-based random streams.

Every random draw in the simulator comes from a stream keyed by the
experiment seed plus a tuple of purpose tags (client id, round, phase
name, ...). Streams with the same key produce the same sequence on every
platform, and distinct keys give statistically independent sequences, so
simulated clients can run in any order (or in parallel) without changing
the results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *tags: object) -> int:
    """Derive a 128-bit Philox key from a seed and a tag tuple."""
    label = "\x1f".join(str(t) for t in (int(seed), *tags))
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *tags: object) -> np.random.Generator:
    """Return an independent generator for (seed, *tags)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *tags)))
