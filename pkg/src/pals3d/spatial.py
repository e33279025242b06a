"""Spatial index for mesh-free evaluation over scattered points."""

import numpy as np
from scipy.spatial import cKDTree


class NeighborIndex:
    """Ball-query index over a fixed point set.

    query_ball(center, radius) returns the indices of exactly the points
    inside the closed ball, as a sorted integer array.
    """

    def __init__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query_ball(self, center, radius: float) -> np.ndarray:
        idx = self._tree.query_ball_point(np.asarray(center, dtype=float), float(radius))
        return np.sort(np.asarray(idx, dtype=np.intp))
