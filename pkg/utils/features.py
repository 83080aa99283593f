"""
Multiscale spherical neighborhood features.

Scale s uses the radius r_s = r0 * phi**s and searches neighbors in the
cloud subsampled on a grid of cell size r_s / rho, so a neighborhood never
holds more than about (2 rho + 2)**3 points whatever the input density.

Per scale, every query point gets 18 geometric values (FEATURE_NAMES) and,
for colored clouds, 6 color values (COLOR_FEATURE_NAMES). The feature
matrix is laid out scale-major: columns [s * d, (s + 1) * d) hold scale s.

All neighborhood statistics go through the batched kernels below
(segment sums over a flat neighbor list). The single-neighborhood
functions call the same kernels with one segment.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import xlogy

from utils.cloud_io import PointCloud, as_point, read_text
from utils.errors import FormatError, ParameterError, StorageError
from utils.spatial import GridSpec, build_index, grid_subsample

logger = logging.getLogger(__name__)

LAYOUT_VERSION = 'v1'

FEATURE_NAMES = (
    'sum_eigenvalues', 'omnivariance', 'eigenentropy',
    'linearity', 'planarity', 'sphericity', 'change_of_curvature',
    'verticality_e1', 'verticality_e3',
    'moment1_e1', 'moment1_e2', 'moment1_e3',
    'moment2_e1', 'moment2_e2', 'moment2_e3',
    'vertical_moment1', 'vertical_moment2',
    'n_points',
)
COLOR_FEATURE_NAMES = (
    'red_mean', 'green_mean', 'blue_mean',
    'red_variance', 'green_variance', 'blue_variance',
)

# queries per work item; fixed so results do not depend on the worker count
CHUNK_SIZE = 2048


@dataclass(frozen=True)
class ScaleConfig:
    """Neighborhood scales: radius r0 * phi**s for s < n_scales, grid cell radius / rho."""
    r0: float = 0.1
    n_scales: int = 8
    phi: float = 2.0
    rho: float = 5.0

    def __post_init__(self):
        for name in ('r0', 'phi', 'rho'):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.r0 <= 0:
            raise ParameterError(f"r0 must be positive, got {self.r0}")
        if self.phi <= 1:
            raise ParameterError(f"phi must be greater than 1, got {self.phi}")
        if self.rho <= 0:
            raise ParameterError(f"rho must be positive, got {self.rho}")
        if int(self.n_scales) != self.n_scales or self.n_scales < 1:
            raise ParameterError(f"n_scales must be a positive integer, got {self.n_scales}")
        object.__setattr__(self, 'n_scales', int(self.n_scales))

    @property
    def radii(self):
        return tuple(self.r0 * self.phi ** s for s in range(self.n_scales))

    @property
    def cell_sizes(self):
        return tuple(radius / self.rho for radius in self.radii)

    def fingerprint(self, per_scale):
        return (f"layout={LAYOUT_VERSION};S={self.n_scales};d={per_scale};"
                f"r0={self.r0!r};phi={self.phi!r};rho={self.rho!r}")

    def occupancy_bound(self):
        """Largest possible neighbor count on a grid with cell radius / rho."""
        return (2 * math.ceil(self.rho) + 2) ** 3


OUTDOOR = ScaleConfig(r0=0.1, n_scales=8, phi=2.0, rho=5.0)
INDOOR = ScaleConfig(r0=0.05, n_scales=8, phi=2.0, rho=5.0)


@dataclass(frozen=True)
class PyramidLevel:
    scale: int
    radius: float
    cell_size: float
    cloud: PointCloud
    index: object


@dataclass(frozen=True)
class ScalePyramid:
    config: ScaleConfig
    origin: tuple
    levels: tuple

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, scale):
        return self.levels[scale]

    @property
    def has_colors(self):
        return self.levels[0].cloud.has_colors


@dataclass(frozen=True)
class EigenTriple:
    """Eigenvalues in descending order and matching eigenvectors as columns."""
    values: np.ndarray
    vectors: np.ndarray

    @property
    def e1(self):
        return self.vectors[:, 0]

    @property
    def e2(self):
        return self.vectors[:, 1]

    @property
    def e3(self):
        return self.vectors[:, 2]


def build_pyramid(cloud, cfg, origin=None):
    """Subsample ``cloud`` once per scale and index every level."""
    if len(cloud) == 0:
        raise ParameterError("cannot build a scale pyramid from an empty cloud")
    origin = tuple(float(v) for v in (cloud.min_corner() if origin is None else as_point(origin)))
    levels = []
    for scale, (radius, cell_size) in enumerate(zip(cfg.radii, cfg.cell_sizes)):
        subsampled = grid_subsample(cloud, GridSpec(cell_size, origin))
        levels.append(PyramidLevel(scale, radius, cell_size, subsampled, build_index(subsampled)))
        logger.info("Scale %d: radius %.4g m, cell %.4g m, %d points", scale, radius, cell_size, len(subsampled))
    return ScalePyramid(cfg, origin, tuple(levels))


def neighborhood(pyramid, s, p0):
    """Subsampled points of scale ``s`` within radius r_s of ``p0``."""
    if not 0 <= s < len(pyramid):
        raise ParameterError(f"scale {s} out of range [0, {len(pyramid)})")
    level = pyramid[s]
    found = level.index.query(p0, level.radius)
    colors = level.cloud.colors[found] if level.cloud.has_colors else None
    return PointCloud(level.cloud.positions[found], colors)


# ---------------------------------------------------------------------------
# batched kernels: ``owner[m]`` is the query that flat neighbor m belongs to
# ---------------------------------------------------------------------------

def _segment_sum(values, owner, n):
    values = values.reshape(len(values), -1)
    return np.column_stack([
        np.bincount(owner, weights=values[:, column], minlength=n)
        for column in range(values.shape[1])
    ])


def _ratio(numerator, denominator):
    return np.divide(numerator, denominator, out=np.zeros_like(numerator), where=denominator > 0)


def _covariance_batch(points, owner, counts):
    n = len(counts)
    safe = np.maximum(counts, 1).astype(np.float64)[:, None]
    centroids = _segment_sum(points, owner, n) / safe
    centered = points - centroids[owner]
    outer = (centered[:, :, None] * centered[:, None, :]).reshape(-1, 9)
    cov = (_segment_sum(outer, owner, n) / safe).reshape(n, 3, 3)
    return 0.5 * (cov + cov.transpose(0, 2, 1))


def _eigen_batch(matrices):
    values, vectors = np.linalg.eigh(matrices)
    values = np.maximum(values[:, ::-1], 0.0)
    vectors = vectors[:, :, ::-1]
    # sign: largest-magnitude component of each eigenvector is positive
    lead = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(np.take_along_axis(vectors, lead[:, None, :], axis=1))
    return np.ascontiguousarray(values), np.ascontiguousarray(vectors * signs)


def _geometric_block(points, owner, counts, queries, values, vectors):
    n = len(counts)
    safe = np.maximum(counts, 1).astype(np.float64)
    l1, l2, l3 = values[:, 0], values[:, 1], values[:, 2]
    total = values.sum(axis=1)
    out = np.zeros((n, len(FEATURE_NAMES)))
    out[:, 0] = total
    out[:, 1] = np.cbrt(l1 * l2 * l3)
    out[:, 2] = -xlogy(values, values).sum(axis=1)
    out[:, 3] = _ratio(l1 - l2, l1)
    out[:, 4] = _ratio(l2 - l3, l1)
    out[:, 5] = _ratio(l3, l1)
    out[:, 6] = _ratio(l3, total)

    # |pi/2 - angle(e, ez)| == arcsin(|e . ez|); undefined without any spread
    vertical = np.arcsin(np.clip(np.abs(vectors[:, 2, :]), 0.0, 1.0))
    spread = l1 > 0
    out[:, 7] = np.where(spread, vertical[:, 0], 0.0)
    out[:, 8] = np.where(spread, vertical[:, 2], 0.0)

    offsets = points - queries[owner]
    projections = np.einsum('mc,mcv->mv', offsets, vectors[owner])
    out[:, 9:12] = np.abs(_segment_sum(projections, owner, n)) / safe[:, None]
    out[:, 12:15] = np.abs(_segment_sum(projections ** 2, owner, n)) / safe[:, None]
    dz = offsets[:, 2]
    out[:, 15] = _segment_sum(dz, owner, n)[:, 0] / safe
    out[:, 16] = _segment_sum(dz ** 2, owner, n)[:, 0] / safe
    out[:, 17] = counts
    return out


def _color_block(colors, owner, counts):
    n = len(counts)
    safe = np.maximum(counts, 1).astype(np.float64)[:, None]
    means = _segment_sum(colors, owner, n) / safe
    squared = _segment_sum((colors - means[owner]) ** 2, owner, n)
    bessel = np.repeat((counts - 1).astype(np.float64)[:, None], 3, axis=1)
    return np.hstack([means, _ratio(squared, bessel)])


# ---------------------------------------------------------------------------
# single-neighborhood operations
# ---------------------------------------------------------------------------

def _as_points(neigh):
    points = neigh.positions if isinstance(neigh, PointCloud) else np.asarray(neigh, dtype=np.float64)
    points = points.reshape(-1, 3)
    if len(points) == 0:
        raise ParameterError("neighborhood is empty")
    return points


def _one_segment(k):
    return np.zeros(k, dtype=np.int64), np.array([k], dtype=np.int64)


def covariance(neigh):
    """Population covariance (1/|N|) sum (p - centroid)(p - centroid)^T, exactly symmetric."""
    points = _as_points(neigh)
    owner, counts = _one_segment(len(points))
    return _covariance_batch(points, owner, counts)[0]


def eigen3(m):
    """Eigen decomposition of a symmetric 3x3 matrix, descending, with a fixed sign convention."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ParameterError(f"expected a 3x3 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ParameterError("matrix entries must be finite")
    values, vectors = _eigen_batch(m[None])
    return EigenTriple(values[0], vectors[0])


def geometric_features(neigh, p0, eig):
    """The 18 geometric values of one neighborhood around ``p0``."""
    points = _as_points(neigh)
    owner, counts = _one_segment(len(points))
    p0 = as_point(p0)
    return _geometric_block(points, owner, counts, p0[None],
                            np.asarray(eig.values, dtype=np.float64)[None],
                            np.asarray(eig.vectors, dtype=np.float64)[None])[0]


def color_features(colors):
    """Per-channel mean then per-channel sample variance (0 for a single point)."""
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(colors) == 0:
        raise ParameterError("neighborhood is empty")
    owner, counts = _one_segment(len(colors))
    return _color_block(colors, owner, counts)[0]


# ---------------------------------------------------------------------------
# feature matrix
# ---------------------------------------------------------------------------

def feature_names(n_scales, per_scale):
    names = FEATURE_NAMES + (COLOR_FEATURE_NAMES if per_scale == len(FEATURE_NAMES) + len(COLOR_FEATURE_NAMES) else ())
    if len(names) != per_scale:
        raise ParameterError(f"unsupported per-scale width {per_scale}")
    return tuple(f"s{scale}_{name}" for scale in range(n_scales) for name in names)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """One row per query point, ``config.n_scales * per_scale`` columns."""
    values: np.ndarray
    config: ScaleConfig
    per_scale: int
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.config.n_scales * self.per_scale:
            raise ParameterError(
                f"feature matrix shape {values.shape} does not match "
                f"{self.config.n_scales} scales x {self.per_scale} features"
            )
        object.__setattr__(self, 'values', values)

    def __len__(self):
        return len(self.values)

    @property
    def names(self):
        return feature_names(self.config.n_scales, self.per_scale)

    @property
    def fingerprint(self):
        return self.config.fingerprint(self.per_scale)

    def scale_block(self, s):
        return self.values[:, s * self.per_scale:(s + 1) * self.per_scale]

    def take(self, rows):
        return FeatureMatrix(self.values[rows], self.config, self.per_scale, self.origin)


def _scale_features(level, block, use_colors):
    flat, counts = level.index.query_many(block, level.radius)
    owner = np.repeat(np.arange(len(block)), counts)
    points = level.cloud.positions[flat]
    values, vectors = _eigen_batch(_covariance_batch(points, owner, counts))
    features = _geometric_block(points, owner, counts, block, values, vectors)
    if use_colors:
        features = np.hstack([features, _color_block(level.cloud.colors[flat], owner, counts)])
    return features


def extract_features(cloud, pyramid, query_indices=None, workers=1, chunk_size=CHUNK_SIZE):
    """Compute the multiscale feature rows of the given points of ``cloud``.

    Parameters
    ----------
    cloud : PointCloud
        Cloud whose points are queried; neighbors come from ``pyramid``.
    pyramid : ScalePyramid
        Built from ``cloud`` or from a cloud covering all query points.
    query_indices : array-like of int, optional
        Rows to compute, all points when omitted.
    workers : int
        Threads working on fixed-size query chunks; output does not depend on it.
    """
    n = len(cloud)
    if query_indices is None:
        indices = np.arange(n)
    else:
        indices = np.asarray(query_indices, dtype=np.int64).reshape(-1)
        if len(indices) and (indices.min() < 0 or indices.max() >= n):
            raise ParameterError(f"query index out of range for a cloud of {n} points")
    use_colors = cloud.has_colors and pyramid.has_colors
    per_scale = len(FEATURE_NAMES) + (len(COLOR_FEATURE_NAMES) if use_colors else 0)
    queries = cloud.positions[indices]
    out = np.empty((len(indices), pyramid.config.n_scales * per_scale))

    def work(start):
        stop = min(start + chunk_size, len(queries))
        block = queries[start:stop]
        for level in pyramid.levels:
            columns = slice(level.scale * per_scale, (level.scale + 1) * per_scale)
            out[start:stop, columns] = _scale_features(level, block, use_colors)

    started = time.perf_counter()
    starts = range(0, len(queries), chunk_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, starts))
    else:
        for start in starts:
            work(start)
    elapsed = time.perf_counter() - started
    logger.info("Extracted %d x %d features in %.2fs (%.0f points/s)", out.shape[0], out.shape[1],
                elapsed, len(queries) / elapsed if elapsed > 0 else float('inf'))
    return FeatureMatrix(out, pyramid.config, per_scale, pyramid.origin)


def _header_path(path):
    return Path(f"{path}.hdr")


def save_features(matrix, path):
    """Raw little-endian float64 rows plus a ``.hdr`` key=value sidecar."""
    if not str(path):
        raise StorageError("empty output path")
    cfg = matrix.config
    header = {
        'n_rows': len(matrix),
        'n_cols': matrix.values.shape[1],
        'n_scales': cfg.n_scales,
        'per_scale': matrix.per_scale,
        'r0': repr(cfg.r0),
        'phi': repr(cfg.phi),
        'rho': repr(cfg.rho),
        'origin': ','.join(repr(float(v)) for v in matrix.origin),
        'fingerprint': matrix.fingerprint,
        'feature_names': ','.join(matrix.names),
    }
    try:
        matrix.values.astype('<f8').tofile(str(path))
        _header_path(path).write_text(''.join(f"{key}={value}\n" for key, value in header.items()), encoding='utf-8')
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load_features(path):
    path = Path(path)
    header_path = _header_path(path)
    if not path.is_file() or not header_path.is_file():
        raise StorageError(f"missing feature file or header: {path}")
    header = {}
    for line in read_text(header_path).splitlines():
        if line.strip():
            key, _, value = line.partition('=')
            header[key.strip()] = value.strip()
    try:
        n_rows, n_cols = int(header['n_rows']), int(header['n_cols'])
        cfg = ScaleConfig(float(header['r0']), int(header['n_scales']), float(header['phi']), float(header['rho']))
        per_scale = int(header['per_scale'])
        origin = tuple(float(v) for v in header['origin'].split(','))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{header_path}: bad feature header ({exc})") from exc
    values = np.fromfile(str(path), dtype='<f8')
    if values.size != n_rows * n_cols:
        raise FormatError(f"{path}: expected {n_rows * n_cols} values, found {values.size}")
    return FeatureMatrix(values.reshape(n_rows, n_cols).astype(np.float64), cfg, per_scale, origin)


def export_features_csv(matrix, path):
    pd.DataFrame(matrix.values, columns=list(matrix.names)).to_csv(path, index=False)
