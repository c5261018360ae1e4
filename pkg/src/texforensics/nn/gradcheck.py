"""Central finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

from typing import Callable

import numpy as np


def sample_coords(shape, count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Up to ``count`` distinct flat positions, returned as index tuples."""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in np.sort(flat)]


def numeric_grad(loss: Callable[[], float], arr: np.ndarray, coords, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. ``arr[c]`` for each coordinate, perturbing in place."""
    out = np.empty(len(coords))
    for k, c in enumerate(coords):
        orig = arr[c]
        arr[c] = orig + eps
        up = loss()
        arr[c] = orig - eps
        down = loss()
        arr[c] = orig
        out[k] = (up - down) / (2 * eps)
    return out


def relative_error(analytic, numeric) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over the sampled coordinates (0 when both vanish)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)
