"""Deterministic RNG derivation: every random stream comes from (seed, stream ids)."""

from __future__ import annotations

import numpy as np

# stream ids, fixed forever so artifacts stay reproducible across versions
INIT = 1
AUGMENT = 2
ATTACK = 3
SHUFFLE = 4
SPLIT = 5
EVAL = 6
NOISE = 7


def derive_rng(seed: int, *streams: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(s) for s in streams]]))
