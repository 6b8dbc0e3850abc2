"""Seeded random streams.

Every random draw in the library comes from a Philox (counter-based)
generator keyed by a root seed plus an integer stream path, so independent
consumers (scenes, batches, labels) never share state and reruns reproduce
bit-for-bit.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(s) for s in stream)])
    return np.random.Generator(np.random.Philox(ss))


def signs_from_uniform(u):
    """Map uniforms in [0, 1) to signs: +1 below 0.5, -1 otherwise."""
    return np.where(np.asarray(u) < 0.5, 1.0, -1.0)


def draw_sign(rng: np.random.Generator) -> float:
    return 1.0 if rng.random() < 0.5 else -1.0
