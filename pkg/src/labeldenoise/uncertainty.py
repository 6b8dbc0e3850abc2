"""Difficulty scores from predicted log scales.

Each regressed attribute v in ``ATTRS`` (depth and the four box corners)
carries a predicted log scale ``log_sigma``.  Certainty is ``exp(-log_sigma)``;
difficulty scores are certainties min-max normalized against running extrema
that are smoothed across batches with an exponential moving average.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import EmptyBatch, NonFinite, Uninitialized

ATTRS = ("d", "l", "t", "r", "b")
BOX_ATTRS = ("l", "t", "r", "b")
DEFAULT_BETA = 0.8
_DEGENERATE_RANGE = 1e-12


@dataclass(frozen=True)
class DifficultyScores:
    c_hat: Mapping[str, float]

    def __post_init__(self):
        for v, s in self.c_hat.items():
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"score for {v!r} outside [0, 1]: {s}")

    @classmethod
    def constant(cls, value: float) -> "DifficultyScores":
        return cls({v: float(value) for v in ATTRS})

    def box(self) -> tuple[float, float, float, float]:
        return tuple(self.c_hat[v] for v in BOX_ATTRS)

    def as_array(self) -> np.ndarray:
        return np.array([self.c_hat[v] for v in ATTRS])


@dataclass(frozen=True)
class RunningExtrema:
    """Per-attribute running (min, max) certainty.  Empty until the first batch."""

    bounds: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def initialized(self, attrs=ATTRS) -> bool:
        return all(v in self.bounds for v in attrs)

    def get(self, v: str) -> tuple[float, float]:
        try:
            return self.bounds[v]
        except KeyError:
            raise Uninitialized(f"no extrema recorded for attribute {v!r}") from None

    def to_text(self) -> str:
        """Checkpoint section: one ``attribute min max`` line per tracked attribute."""
        return "".join(f"{v} {lo!r} {hi!r}\n" for v, (lo, hi) in self.bounds.items())

    @classmethod
    def from_text(cls, text: str) -> "RunningExtrema":
        bounds = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            v, lo, hi = line.split()
            bounds[v] = (float(lo), float(hi))
        return cls(bounds)


def certainty(log_sigma):
    """``exp(-log_sigma)``; accepts scalars or arrays."""
    arr = np.asarray(log_sigma, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFinite("log scale must be finite")
    out = np.exp(-arr)
    return float(out) if out.ndim == 0 else out


def normalize(c, extrema: tuple[float, float] | None):
    """Min-max normalize certainty into [0, 1].

    Values outside the running extrema are clamped; a range narrower than
    1e-12 maps everything to 0.5.
    """
    if extrema is None:
        raise Uninitialized("extrema not seeded")
    lo, hi = extrema
    arr = np.asarray(c, dtype=np.float64)
    if hi - lo < _DEGENERATE_RANGE:
        out = np.full_like(arr, 0.5)
    else:
        out = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def ema_update(
    state: RunningExtrema,
    batch_certainties: Mapping[str, np.ndarray],
    beta: float = DEFAULT_BETA,
) -> RunningExtrema:
    """Blend the batch min/max of each attribute into the running extrema.

    The first batch seen for an attribute seeds its extrema verbatim.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    bounds = dict(state.bounds)
    for v, values in batch_certainties.items():
        arr = np.asarray(values, dtype=np.float64).ravel()
        if arr.size == 0:
            raise EmptyBatch(f"no certainties for attribute {v!r}")
        if not np.all(np.isfinite(arr)):
            raise NonFinite(f"non-finite certainty for attribute {v!r}")
        b_lo, b_hi = float(arr.min()), float(arr.max())
        if v in bounds:
            lo, hi = bounds[v]
            lo = beta * lo + (1.0 - beta) * b_lo
            hi = beta * hi + (1.0 - beta) * b_hi
            if lo > hi:
                lo, hi = hi, lo
        else:
            lo, hi = b_lo, b_hi
        bounds[v] = (lo, hi)
    return RunningExtrema(bounds)


def scores_from_logvars(lv: Mapping[str, float], state: RunningExtrema) -> DifficultyScores:
    return DifficultyScores({v: normalize(certainty(lv[v]), state.get(v)) for v in ATTRS})


def score_matrix(log_sigma: np.ndarray, state: RunningExtrema) -> np.ndarray:
    """Vectorized scores: (K, 5) log scales in ``ATTRS`` order to (K, 5) scores."""
    log_sigma = np.asarray(log_sigma, dtype=np.float64)
    c = certainty(log_sigma).reshape(log_sigma.shape)
    return np.stack([normalize(c[:, j], state.get(v)) for j, v in enumerate(ATTRS)], axis=1)


def certainty_columns(log_sigma: np.ndarray) -> dict[str, np.ndarray]:
    c = np.atleast_2d(certainty(np.asarray(log_sigma, dtype=np.float64)))
    return {v: c[:, j] for j, v in enumerate(ATTRS)}

