"""Seeding helpers: named, reproducible RNG substreams from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *labels: object) -> np.random.Generator:
    """Independent generator for (seed, labels...).

    Labels are hashed into the SeedSequence spawn key, so distinct label
    tuples give statistically independent streams and the same tuple always
    reproduces the same stream.  All randomness in a pipeline run should flow
    from one root seed through named substreams (train / synth / eval /
    repeat indices).
    """
    digest = hashlib.blake2b(
        "".join(str(l) for l in labels).encode("utf-8"), digest_size=8
    ).digest()
    key = int.from_bytes(digest, "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))
