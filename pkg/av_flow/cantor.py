from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_DEPTH = 40


@dataclass(frozen=True, eq=False)
class FatCantor:
    """
    A finite-depth Smith-Volterra-Cantor set in [0, 1].

    Stage k removes an open gap of length 4^-k from every remaining piece, so
    the measure after d stages is 1/2 + 2^(-d-1) regardless of where the gaps
    sit. The seed only jitters the gap centres.
    """

    left: np.ndarray
    right: np.ndarray
    depth: int
    seed: int

    @property
    def measure(self) -> float:
        return float(np.sum(self.right - self.left))

    @property
    def longest_piece(self) -> float:
        return float(np.max(self.right - self.left))

    def contains(self, x: np.ndarray | float) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.left, x, side="right") - 1
        safe = np.clip(idx, 0, self.left.size - 1)
        return (idx >= 0) & (x <= self.right[safe])

    def mass_below(self, x: np.ndarray | float) -> np.ndarray:
        """Measure of K ∩ [0, x]."""

        x = np.asarray(x, dtype=float)
        lengths = self.right - self.left
        before = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
        idx = np.searchsorted(self.left, x, side="right") - 1
        safe = np.clip(idx, 0, self.left.size - 1)
        partial = np.clip(x - self.left[safe], 0.0, lengths[safe])
        return np.where(idx >= 0, before[safe] + partial, 0.0)

    def overlap(self, a: np.ndarray | float, b: np.ndarray | float) -> np.ndarray:
        return self.mass_below(b) - self.mass_below(a)

    def covers(self, a: np.ndarray | float, b: np.ndarray | float) -> np.ndarray:
        """True where [a, b] lies inside a single piece of K."""

        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        idx = np.searchsorted(self.left, a, side="right") - 1
        safe = np.clip(idx, 0, self.left.size - 1)
        return (idx >= 0) & (b <= self.right[safe])


@lru_cache(maxsize=64)
def fat_cantor(
    seed: int = 0,
    *,
    depth: int | None = None,
    resolution: float | None = None,
    jitter: float = 0.05,
) -> FatCantor:
    """
    Build K either to a fixed depth or until every piece is shorter than
    resolution/4, so that each grid cell of width `resolution` meets a gap.
    """

    if depth is None and resolution is None:
        raise ValueError("fat_cantor needs depth or resolution")
    if resolution is not None and resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    if not 0.0 <= jitter < 0.1:
        raise ValueError(f"jitter must lie in [0, 0.1), got {jitter}")

    rng = np.random.default_rng(seed)
    left = np.array([0.0])
    right = np.array([1.0])
    k = 0
    while k < MAX_DEPTH:
        if depth is not None and k >= depth:
            break
        if depth is None and np.max(right - left) < resolution / 4.0:
            break
        k += 1
        gap = 4.0**-k
        lengths = right - left
        centre = left + lengths * (0.5 + rng.uniform(-jitter, jitter, size=lengths.size))
        gap_left = centre - gap / 2.0
        gap_right = centre + gap / 2.0
        left = np.column_stack([left, gap_right]).ravel()
        right = np.column_stack([gap_left, right]).ravel()

    left.setflags(write=False)
    right.setflags(write=False)
    return FatCantor(left=left, right=right, depth=k, seed=seed)
