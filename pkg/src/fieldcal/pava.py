"""Pool-adjacent-violators for weighted least-squares isotonic regression."""

from __future__ import annotations

import numpy as np


def pava(values, weights=None) -> np.ndarray:
    """Non-decreasing least-squares fit to ``values`` (already in x order).

    Returns one fitted value per input. Runs in O(n) with a block stack.
    """
    y = np.asarray(values, dtype=np.float64).reshape(-1)
    n = y.size
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape != y.shape:
        raise ValueError("weights must match values")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    # block stack: level, weight, length
    level = np.empty(n)
    wsum = np.empty(n)
    size = np.empty(n, dtype=np.int64)
    top = -1
    for i in range(n):
        top += 1
        level[top], wsum[top], size[top] = y[i], w[i], 1
        while top > 0 and level[top - 1] > level[top]:
            tw = wsum[top - 1] + wsum[top]
            level[top - 1] = (level[top - 1] * wsum[top - 1] + level[top] * wsum[top]) / tw
            wsum[top - 1] = tw
            size[top - 1] += size[top]
            top -= 1
    return np.repeat(level[: top + 1], size[: top + 1])
