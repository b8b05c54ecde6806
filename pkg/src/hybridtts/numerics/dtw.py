"""Dynamic time warping over a cost matrix with steps right/down/diagonal."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def dtw_path(cost: Tensor | np.ndarray) -> list[tuple[int, int]]:
    """Monotone path (0,0) -> (m-1,n-1) minimizing summed cost.

    Steps are {(1,0), (0,1), (1,1)} with unit step cost; ties prefer the
    diagonal so paths are deterministic.
    """
    c = cost.data if isinstance(cost, Tensor) else np.asarray(cost, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError("cost must be a non-empty 2-D matrix")
    m, n = c.shape
    acc = np.full((m, n), np.inf)
    acc[0, 0] = c[0, 0]
    for i in range(m):
        for j in range(n):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0:
                best = min(best, acc[i - 1, j])
            if j > 0:
                best = min(best, acc[i, j - 1])
            acc[i, j] = c[i, j] + best

    path = [(m - 1, n - 1)]
    i, j = m - 1, n - 1
    while (i, j) != (0, 0):
        candidates = []
        if i > 0 and j > 0:
            candidates.append((acc[i - 1, j - 1], (i - 1, j - 1)))
        if i > 0:
            candidates.append((acc[i - 1, j], (i - 1, j)))
        if j > 0:
            candidates.append((acc[i, j - 1], (i, j - 1)))
        _, (i, j) = min(candidates, key=lambda t: t[0])
        path.append((i, j))
    path.reverse()
    return path


def dtw_cost(cost: Tensor | np.ndarray, path: list[tuple[int, int]]) -> float:
    c = cost.data if isinstance(cost, Tensor) else np.asarray(cost)
    return float(sum(c[i, j] for i, j in path))
