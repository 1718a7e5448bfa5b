"""Deterministic, splittable random streams.

Every stochastic component takes an explicit numpy Generator derived from a
base seed plus a tag path, e.g. ``stream(seed, "client", round_idx, cid)``.
Streams are counter-based (Philox), so any stream can be re-created from its
tags alone: checkpoints only need to record the base seed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (bool,)):
        raise TypeError("bool is not a valid stream tag")
    if isinstance(tag, (int, np.integer)):
        value = int(tag)
        if value < 0:
            raise ValueError(f"stream tags must be non-negative, got {value}")
        return value
    if isinstance(tag, str):
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"unsupported stream tag type: {type(tag).__name__}")


def stream(seed: int, *tags) -> np.random.Generator:
    """Return the Generator identified by (seed, *tags).

    The same arguments always produce the same stream, independent of call
    order and of how much any other stream has been consumed.
    """
    entropy = [_tag_to_int(seed)] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
