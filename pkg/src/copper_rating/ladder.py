from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# default 7-level ladder; fits every published purity/level pair
DEFAULT_THRESHOLDS = (0.95, 0.94, 0.88, 0.85, 0.82, 0.745)


@dataclass(frozen=True)
class LevelLadder:
    """Monotone purity -> level mapping; level 1 is the best grade.

    ``thresholds`` are strictly decreasing in (0, 1). A purity ``p`` gets the
    smallest level ``j`` with ``p >= thresholds[j-1]``, otherwise the last
    level ``len(thresholds) + 1``.
    """

    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        object.__setattr__(self, "thresholds", t)
        if len(t) < 1:
            raise ValueError("a ladder needs at least 2 levels (1 threshold)")
        if any(not (0.0 < x < 1.0) for x in t):
            raise ValueError(f"thresholds must lie in (0, 1), got {t}")
        if any(a <= b for a, b in zip(t, t[1:])):
            raise ValueError(f"thresholds must be strictly decreasing, got {t}")

    @property
    def num_levels(self) -> int:
        return len(self.thresholds) + 1

    @classmethod
    def equal_width(cls, num_levels: int, low: float, high: float = 1.0) -> "LevelLadder":
        """``num_levels`` bins of equal width over ``[low, high]``."""
        if num_levels < 2:
            raise ValueError("num_levels must be >= 2")
        if not 0.0 < low < high <= 1.0:
            raise ValueError(f"need 0 < low < high <= 1, got {low}, {high}")
        width = (high - low) / num_levels
        return cls(tuple(high - j * width for j in range(1, num_levels)))

    def level(self, p: float) -> int:
        return purity_to_level(p, self)

    def levels(self, ps: Sequence[float]) -> np.ndarray:
        return np.array([purity_to_level(p, self) for p in ps], dtype=np.int64)

    def to_dict(self) -> dict:
        return {"num_levels": self.num_levels, "thresholds": list(self.thresholds)}


def purity_to_level(p: float, ladder: LevelLadder) -> int:
    # ascending copy; count of thresholds strictly above p gives the level - 1
    asc = ladder.thresholds[::-1]
    above = len(asc) - bisect.bisect_right(asc, float(p))
    return above + 1
