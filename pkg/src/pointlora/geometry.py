"""Point-set kernels: farthest point sampling, k-NN, patch grouping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PointCloud:
    points: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"expected an (N, 3) array, got {self.points.shape}")
        if len(self.points) < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return len(self.points)


@dataclass
class PatchSet:
    centers: np.ndarray  # (g, 3)
    neighbors: np.ndarray  # (g, k, 3), center subtracted
    center_indices: np.ndarray  # (g,)
    indices: np.ndarray  # (g, k)

    @property
    def num_groups(self) -> int:
        return len(self.centers)

    @property
    def group_size(self) -> int:
        return self.neighbors.shape[1]


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _sq_dist(diff: np.ndarray) -> np.ndarray:
    # fixed x, y, z summation order so equal distances compare equal everywhere
    return (diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]) + diff[..., 2] * diff[..., 2]


def farthest_point_sampling(cloud, g: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min sampling of ``g`` indices, in selection order.

    Distances are squared Euclidean.  Ties go to the lower index.
    """
    pts = _points(cloud)
    n = len(pts)
    if not 1 <= g <= n:
        raise ValueError(f"fps: cannot pick {g} centers from {n} points")
    if not 0 <= seed_index < n:
        raise ValueError(f"fps: seed index {seed_index} out of range")
    chosen = np.empty(g, dtype=np.int64)
    chosen[0] = seed_index
    min_d = np.full(n, np.inf)
    for i in range(1, g):
        diff = pts - pts[chosen[i - 1]]
        min_d = np.minimum(min_d, _sq_dist(diff))
        min_d[chosen[i - 1]] = -1.0  # never re-pick, even among duplicates
        chosen[i] = int(np.argmax(min_d))
    return chosen


def k_nearest_neighbors(cloud, centers, k: int) -> np.ndarray:
    """For each center index, the ``k`` nearest point indices by ascending distance."""
    pts = _points(cloud)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValueError(f"knn: k={k} outside [1, {n}]")
    centers = np.asarray(centers, dtype=np.int64)
    diff = pts[centers][:, None, :] - pts[None, :, :]
    d = _sq_dist(diff)
    kth = np.partition(d, k - 1, axis=1)[:, k - 1]
    out = np.empty((len(centers), k), dtype=np.int64)
    for i in range(len(centers)):
        cand = np.flatnonzero(d[i] <= kth[i])
        order = np.lexsort((cand, d[i, cand]))
        out[i] = cand[order[:k]]
    return out


def group_and_center(cloud, center_indices, neighbor_indices) -> PatchSet:
    pts = _points(cloud)
    center_indices = np.asarray(center_indices, dtype=np.int64)
    neighbor_indices = np.asarray(neighbor_indices, dtype=np.int64)
    centers = pts[center_indices]
    neighbors = pts[neighbor_indices] - centers[:, None, :]
    return PatchSet(centers, neighbors, center_indices, neighbor_indices)


def make_patches(cloud, g: int, k: int, seed_index: int = 0) -> PatchSet:
    """FPS, then k-NN, then centering."""
    centers = farthest_point_sampling(cloud, g, seed_index)
    return group_and_center(cloud, centers, k_nearest_neighbors(cloud, centers, k))
