"""Deterministic random-stream construction.

Every stochastic component in the package draws from a PCG64 generator keyed
by a structured integer tuple: a root seed plus zero or more subkeys (worker
index, reset counter, epoch number, ...). Streams built from distinct keys
are statistically independent, and the same key always reproduces the same
stream regardless of how many other streams were consumed before it. That
property is what makes seed-for-seed reruns and parallel rollouts agree.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *subkeys: int) -> np.random.Generator:
    """Independent generator for the key (seed, *subkeys)."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in subkeys))
    return np.random.Generator(np.random.PCG64(seq))
