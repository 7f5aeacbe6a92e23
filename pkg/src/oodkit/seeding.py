"""Deterministic RNG derivation.

Every random draw in the toolkit goes through a Generator derived from
integer keys, so runs are reproducible end to end and independent
streams never alias (weight init vs shuffling vs corruption).
"""

from __future__ import annotations

import numpy as np

_PURPOSES = {"init": 0, "shuffle": 1, "leaveout": 2, "corrupt": 3, "synth": 4, "sample": 5}


def derived_rng(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Generator for (seed, purpose, *extra); distinct keys give independent streams."""
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF, _PURPOSES[purpose], *(int(e) for e in extra)]
    return np.random.default_rng(np.random.SeedSequence(keys))
