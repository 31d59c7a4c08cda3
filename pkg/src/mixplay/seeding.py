"""Counter-based seed derivation.

Every random stream is ``default_rng(SeedSequence([master, tag, *counters]))``
where ``tag`` is a fixed integer per purpose. Streams never share state, so
consuming one (say, the assignment sampler) cannot shift another (rollouts).
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(name: str) -> int:
    return zlib.crc32(name.encode())


def derive_seed_sequence(seed: int, purpose: str, *counters: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), _tag(purpose), *(int(c) for c in counters)])


def derive_rng(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(seed, purpose, *counters))
