"""Named RNG substreams derived from one master seed.

All randomness in the package flows through `substream`, so that two runs
with the same master seed are bitwise identical, and distinct purposes
(data generation, parameter init, shuffling, negative sampling) never share
a stream even when they execute in a different order.
"""

import hashlib

import numpy as np


def _name_key(name) -> int:
    digest = hashlib.sha256(repr(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(master_seed: int, *names) -> np.random.Generator:
    """Return a Generator for the stream identified by `names` under `master_seed`.

    The same (seed, names) always yields the same stream; different names give
    statistically independent streams (distinct SeedSequence spawn keys).
    """
    key = tuple(_name_key(n) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=key))
