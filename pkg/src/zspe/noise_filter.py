"""Model-prior foreground sampling: flat-kernel mean shift with the object
circumradius as bandwidth, keeping the most populous cluster."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import GeometryError, PointCloud

MAX_ITER = 300
TOL_FACTOR = 1e-4


@dataclass(frozen=True)
class ClusterResult:
    labels: np.ndarray
    modes: np.ndarray
    counts: np.ndarray


def _shift(tree: cKDTree, points: np.ndarray, seed: np.ndarray, bandwidth: float) -> np.ndarray:
    x = seed
    tol = bandwidth * TOL_FACTOR
    for _ in range(MAX_ITER):
        nb = tree.query_ball_point(x, bandwidth)
        if not nb:
            break
        new = points[np.sort(nb)].mean(axis=0)
        step = np.linalg.norm(new - x)
        x = new
        if step < tol:
            break
    return x


def mean_shift(cloud: PointCloud, bandwidth: float) -> ClusterResult:
    """Cluster ``cloud`` by flat-kernel mean shift.

    Points are binned on a grid of cell ``bandwidth / 2``; every occupied bin
    seeds one trajectory from its centroid and all of its points follow that
    trajectory's mode. Modes closer than ``bandwidth / 2`` are merged in
    lexicographic coordinate order.
    """
    if bandwidth <= 0:
        raise GeometryError("bandwidth must be positive")
    pts = cloud.points
    if not len(pts):
        raise GeometryError("empty cloud")
    cell = bandwidth / 2.0
    keys = np.floor(pts / cell).astype(np.int64)
    _, bin_of, bin_size = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    bin_of = bin_of.reshape(-1)
    seeds = np.zeros((len(bin_size), 3))
    np.add.at(seeds, bin_of, pts)
    seeds /= bin_size[:, None]

    tree = cKDTree(pts)
    ends = np.array([_shift(tree, pts, s, bandwidth) for s in seeds])

    # canonical merge: visit converged points in lexicographic order
    order = np.lexsort(ends.T[::-1])
    modes: list[np.ndarray] = []
    seed_mode = np.empty(len(ends), dtype=np.int64)
    for i in order:
        for m, mode in enumerate(modes):
            if np.linalg.norm(ends[i] - mode) < bandwidth / 2:
                seed_mode[i] = m
                break
        else:
            seed_mode[i] = len(modes)
            modes.append(ends[i])
    mode_arr = np.array(modes)
    labels = seed_mode[bin_of]
    counts = np.bincount(labels, minlength=len(mode_arr))
    return ClusterResult(labels, mode_arr, counts)


def select_foreground(cloud: PointCloud, result: ClusterResult) -> PointCloud:
    """Keep the largest cluster; ties go to the mode nearer the cloud centroid,
    then the lower cluster id."""
    return cloud.subset(foreground_indices(cloud, result))


def foreground_indices(cloud: PointCloud, result: ClusterResult) -> np.ndarray:
    counts = result.counts
    best = np.flatnonzero(counts == counts.max())
    if len(best) > 1:
        dist = np.linalg.norm(result.modes[best] - cloud.centroid(), axis=1)
        best = best[np.lexsort((best, dist))]
    return np.flatnonzero(result.labels == best[0])


def filter_by_radius(cloud: PointCloud, radius: float) -> PointCloud:
    """Mean-shift with ``radius`` as bandwidth, returning the dominant cluster."""
    if not len(cloud):
        return cloud
    return select_foreground(cloud, mean_shift(cloud, radius))
