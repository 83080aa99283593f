"""
Voxel-grid subsampling and exact fixed-radius neighbor search.

A point p belongs to the ball of radius r around p0 iff the double-precision
squared distance sum((p - p0)**2) <= r * r. The k-d tree is only used to
produce candidates with a slightly inflated radius; every candidate is then
re-checked with that predicate.
"""
import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from utils.cloud_io import PointCloud, as_point
from utils.errors import ParameterError

logger = logging.getLogger(__name__)

# relative slack on the tree radius; candidates are filtered exactly afterwards
SEARCH_SLACK = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Cubic grid of cell size ``cell_size`` whose cell boundaries pass through ``origin``."""
    cell_size: float
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        cell_size = float(self.cell_size)
        if not math.isfinite(cell_size) or cell_size <= 0:
            raise ParameterError(f"cell size must be positive and finite, got {self.cell_size}")
        origin = tuple(float(v) for v in as_point(self.origin))
        object.__setattr__(self, 'cell_size', cell_size)
        object.__setattr__(self, 'origin', origin)

    @classmethod
    def anchored(cls, cloud, cell_size):
        """Grid anchored at the cloud's axis-aligned minimum corner."""
        return cls(cell_size, tuple(cloud.min_corner()))


def voxel_keys(positions, grid):
    """Integer cell coordinates floor((p - origin) / l), shape (n, 3)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    return np.floor((positions - np.asarray(grid.origin)) / grid.cell_size).astype(np.int64)


def _group_mean(values, inverse, counts):
    sums = np.column_stack([
        np.bincount(inverse, weights=values[:, column], minlength=len(counts))
        for column in range(values.shape[1])
    ])
    return sums / counts[:, None]


def grid_subsample(cloud, grid):
    """Replace the points of every non-empty voxel by their barycenter.

    Output points are ordered by ascending (i, j, k) voxel key. Colors are
    averaged like positions; labels are dropped.
    """
    if len(cloud) == 0:
        return PointCloud(np.empty((0, 3)), np.empty((0, 3)) if cloud.has_colors else None)
    keys = voxel_keys(cloud.positions, grid)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    counts = counts.astype(np.float64)
    positions = _group_mean(cloud.positions, inverse, counts)
    colors = None
    if cloud.has_colors:
        colors = np.clip(_group_mean(cloud.colors, inverse, counts), 0.0, 1.0)
    return PointCloud(positions, colors)


class SpatialIndex:
    """Immutable radius-search structure over the positions of a cloud."""

    def __init__(self, cloud):
        self.cloud = cloud
        self._positions = cloud.positions
        self._tree = cKDTree(self._positions) if len(cloud) else None

    def __len__(self):
        return len(self._positions)

    def query(self, p0, r):
        """Indices of points within the closed ball, ascending."""
        p0 = as_point(p0)
        r = _check_radius(r)
        if self._tree is None:
            return np.empty(0, dtype=np.int64)
        candidates = np.asarray(
            self._tree.query_ball_point(p0, _search_radius(r), return_sorted=True), dtype=np.int64
        )
        if len(candidates) == 0:
            return candidates
        d2 = np.sum((self._positions[candidates] - p0) ** 2, axis=1)
        return candidates[d2 <= r * r]

    def query_many(self, centers, r):
        """Batched closed-ball query.

        Returns
        -------
        flat : ndarray of int64
            Concatenated neighbor indices, ascending within each query.
        counts : ndarray of int64, shape (n_queries,)
            Number of neighbors per query.
        """
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        r = _check_radius(r)
        n = len(centers)
        if self._tree is None or n == 0:
            return np.empty(0, dtype=np.int64), np.zeros(n, dtype=np.int64)
        lists = self._tree.query_ball_point(centers, _search_radius(r), return_sorted=True)
        counts = np.fromiter((len(found) for found in lists), dtype=np.int64, count=n)
        flat = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.int64, count=int(counts.sum()))
        owner = np.repeat(np.arange(n), counts)
        d2 = np.sum((self._positions[flat] - centers[owner]) ** 2, axis=1)
        keep = d2 <= r * r
        if keep.all():
            return flat, counts
        return flat[keep], np.bincount(owner[keep], minlength=n).astype(np.int64)


def _check_radius(r):
    r = float(r)
    if not math.isfinite(r) or r < 0:
        raise ParameterError(f"radius must be finite and non-negative, got {r}")
    return r


def _search_radius(r):
    return np.nextafter(r * (1.0 + SEARCH_SLACK), np.inf)


def build_index(cloud):
    return SpatialIndex(cloud)


def radius_query(index, p0, r):
    """Indices of the indexed points p with ||p - p0|| <= r, ascending."""
    return index.query(p0, r)
