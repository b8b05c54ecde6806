"""Named splittable RNG: every stream derives from one base seed plus a label.

Same (seed, name) always yields the same numpy Generator, so any module can
re-derive its stream without threading generator objects around.
"""

from __future__ import annotations

import numpy as np


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for the sub-stream `name` under `seed`."""
    key = [int(seed) & 0xFFFFFFFF] + [b for b in name.encode("utf-8")]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """n independent child generators drawn deterministically from rng."""
    seeds = rng.integers(0, 2**31 - 1, size=n)
    return [np.random.Generator(np.random.PCG64(int(s))) for s in seeds]
