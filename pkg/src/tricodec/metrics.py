"""Geometric comparison metrics (brute-force, desk scale)."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def chamfer_distance(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    """Symmetric mean squared nearest-neighbor distance between point sets.

    CD(A,B) = mean_a min_b |a-b|^2 + mean_b min_a |a-b|^2, computed densely
    in chunks to bound memory.
    """
    a = np.asarray(a, np.float64).reshape(-1, 3)
    b = np.asarray(b, np.float64).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ShapeError("chamfer distance needs non-empty point sets")

    def one_way(src, dst):
        best = np.full(src.shape[0], np.inf)
        for lo in range(0, dst.shape[0], chunk):
            d = ((src[:, None, :] - dst[None, lo:lo + chunk, :]) ** 2).sum(axis=2)
            best = np.minimum(best, d.min(axis=1))
        return best.mean()

    return float(one_way(a, b) + one_way(b, a))
