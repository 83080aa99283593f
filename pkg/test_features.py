"""
Scale pyramid and per-scale neighborhood features, checked against direct formulas.
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from utils.cloud_io import PointCloud
from utils.errors import ParameterError, StorageError
from utils.features import (
    FEATURE_NAMES, OUTDOOR, EigenTriple, ScaleConfig, build_pyramid, color_features, covariance, eigen3,
    export_features_csv, extract_features, geometric_features, load_features, neighborhood, save_features
)
from utils.spatial import GridSpec, grid_subsample

COLUMN = {name: i for i, name in enumerate(FEATURE_NAMES)}
EIGEN_FEATURES = ['sum_eigenvalues', 'omnivariance', 'eigenentropy', 'linearity', 'planarity',
                  'sphericity', 'change_of_curvature']


def reference_features(points, p0):
    """Straight-from-formula evaluation with plain loops."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    centroid = sum(points) / n
    cov = sum(np.outer(p - centroid, p - centroid) for p in points) / n
    values, vectors = np.linalg.eigh(cov)
    order = np.argsort(values)[::-1]
    l1, l2, l3 = (max(values[i], 0.0) for i in order)
    e = [vectors[:, i] for i in order]
    total = l1 + l2 + l3
    out = {
        'sum_eigenvalues': total,
        'omnivariance': (l1 * l2 * l3) ** (1 / 3),
        'eigenentropy': -sum(l * math.log(l) for l in (l1, l2, l3) if l > 0),
        'linearity': (l1 - l2) / l1 if l1 > 0 else 0.0,
        'planarity': (l2 - l3) / l1 if l1 > 0 else 0.0,
        'sphericity': l3 / l1 if l1 > 0 else 0.0,
        'change_of_curvature': l3 / total if total > 0 else 0.0,
    }
    for name, vec in (('verticality_e1', e[0]), ('verticality_e3', e[2])):
        angle = math.acos(min(1.0, abs(vec[2])))
        out[name] = abs(math.pi / 2 - angle) if l1 > 0 else 0.0
    for k in (1, 2):
        for i in range(3):
            out[f'moment{k}_e{i + 1}'] = abs(sum(np.dot(p - p0, e[i]) ** k for p in points)) / n
        out[f'vertical_moment{k}'] = sum((p[2] - p0[2]) ** k for p in points) / n
    out['n_points'] = n
    return np.array([out[name] for name in FEATURE_NAMES])


def features_of(points, p0):
    return geometric_features(points, p0, eigen3(covariance(points)))


def test_outdoor_radii_and_cells():
    assert np.allclose(OUTDOOR.radii, [0.1, 0.2, 0.4, 0.8, 1.6, 3.2, 6.4, 12.8])
    assert np.allclose(OUTDOOR.cell_sizes, [0.02, 0.04, 0.08, 0.16, 0.32, 0.64, 1.28, 2.56])
    assert OUTDOOR.occupancy_bound() == 1728


@pytest.mark.parametrize("kwargs", [dict(r0=0), dict(n_scales=0), dict(phi=1.0), dict(rho=0)])
def test_scale_config_validation(kwargs):
    with pytest.raises(ParameterError):
        ScaleConfig(**kwargs)


def test_pyramid_matches_voxel_census():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.uniform(0, 2, size=(10_000, 3)))
    cfg = ScaleConfig(r0=0.1, n_scales=4, phi=2.0, rho=2.0)
    pyramid = build_pyramid(cloud, cfg)
    origin = cloud.min_corner()
    sizes = []
    for level, cell in zip(pyramid.levels, cfg.cell_sizes):
        assert level.cell_size == cell
        census = {tuple(k) for k in np.floor((cloud.positions - origin) / cell).astype(int).tolist()}
        assert len(level.cloud) == len(census)
        sizes.append(len(level.cloud))
    assert sizes == sorted(sizes, reverse=True)


def test_single_scale_pyramid():
    cloud = PointCloud(np.random.default_rng(1).uniform(size=(500, 3)))
    cfg = ScaleConfig(r0=0.5, n_scales=1, rho=5.0)
    pyramid = build_pyramid(cloud, cfg)
    assert len(pyramid) == 1
    expected = grid_subsample(cloud, GridSpec(0.1, tuple(cloud.min_corner())))
    assert np.array_equal(pyramid[0].cloud.positions, expected.positions)


def test_empty_cloud_pyramid():
    with pytest.raises(ParameterError):
        build_pyramid(PointCloud(np.empty((0, 3))), OUTDOOR)


def test_neighborhood_of_single_point_cloud():
    cloud = PointCloud([[1.0, 2.0, 3.0]])
    pyramid = build_pyramid(cloud, ScaleConfig(r0=0.1, n_scales=3))
    for s in range(3):
        assert np.allclose(neighborhood(pyramid, s, (1.0, 2.0, 3.0)).positions, [[1.0, 2.0, 3.0]])
    with pytest.raises(ParameterError):
        neighborhood(pyramid, 3, (1.0, 2.0, 3.0))


def test_neighborhood_of_own_point_is_never_empty():
    rng = np.random.default_rng(2)
    cloud = PointCloud(rng.uniform(0, 5, size=(2000, 3)))
    pyramid = build_pyramid(cloud, ScaleConfig(r0=0.05, n_scales=4, rho=1.0))
    for p0 in cloud.positions[:100]:
        for s in range(4):
            assert len(neighborhood(pyramid, s, p0)) >= 1


@pytest.mark.parametrize("rho", [1.0, 3.0, 5.0])
def test_occupancy_bound_on_dense_clouds(rho):
    rng = np.random.default_rng(int(rho))
    cfg = ScaleConfig(r0=0.1, n_scales=3, phi=2.0, rho=rho)
    # dense enough to fill every grid cell at the coarser scales
    cloud = PointCloud(rng.uniform(-0.5, 0.5, size=(60_000, 3)))
    pyramid = build_pyramid(cloud, cfg)
    features = extract_features(cloud, pyramid, np.arange(0, 60_000, 600))
    counts = features.values[:, COLUMN['n_points']::len(FEATURE_NAMES)]
    assert counts.max() <= (2 * rho + 2) ** 3


def test_covariance_examples():
    assert np.array_equal(covariance([[1.0, 2.0, 3.0]]), np.zeros((3, 3)))
    assert np.array_equal(covariance([[1.0, 0, 0], [-1.0, 0, 0]]), np.diag([1.0, 0, 0]))
    points = np.random.default_rng(3).normal(size=(50, 3))
    centered = points - points.mean(axis=0)
    expected = sum(np.outer(c, c) for c in centered) / 50
    assert np.allclose(covariance(points), expected, rtol=0, atol=1e-12)
    cov = covariance(points)
    assert np.array_equal(cov, cov.T)


def test_eigen3_examples():
    eig = eigen3(np.diag([1.0, 3.0, 2.0]))
    assert np.allclose(eig.values, [3, 2, 1])
    assert np.allclose(np.abs(eig.vectors), [[0, 0, 1], [1, 0, 0], [0, 1, 0]])
    eig = eigen3(np.eye(3))
    assert np.allclose(eig.values, [1, 1, 1])
    assert np.allclose(eig.vectors.T @ eig.vectors, np.eye(3), atol=1e-9)


def test_eigen3_reconstruction_and_sign_convention():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        a = rng.normal(size=(3, 3))
        m = a @ a.T
        eig = eigen3(m)
        assert np.all(np.diff(eig.values) <= 0) and eig.values.min() >= 0
        rebuilt = sum(eig.values[i] * np.outer(eig.vectors[:, i], eig.vectors[:, i]) for i in range(3))
        assert np.linalg.norm(rebuilt - m) / np.linalg.norm(m) <= 1e-9
        assert np.allclose(eig.vectors.T @ eig.vectors, np.eye(3), atol=1e-9)
        for i in range(3):
            lead = np.argmax(np.abs(eig.vectors[:, i]))
            assert eig.vectors[lead, i] > 0


def test_collinear_neighborhood():
    points = np.column_stack([np.linspace(-1, 1, 20), np.zeros(20), np.zeros(20)])
    f = features_of(points, (0.0, 0.0, 0.0))
    assert f[COLUMN['linearity']] == pytest.approx(1.0)
    assert f[COLUMN['planarity']] == pytest.approx(0.0, abs=1e-12)
    assert f[COLUMN['sphericity']] == pytest.approx(0.0, abs=1e-12)
    assert f[COLUMN['verticality_e1']] == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(f))


def test_isotropic_eigenvalues():
    f = geometric_features([[0.0, 0.0, 0.0]], (0.0, 0.0, 0.0), EigenTriple(np.array([2.0, 2.0, 2.0]), np.eye(3)))
    assert f[COLUMN['sphericity']] == 1.0
    assert f[COLUMN['linearity']] == 0.0 and f[COLUMN['planarity']] == 0.0
    assert f[COLUMN['change_of_curvature']] == pytest.approx(1 / 3)


def test_horizontal_disc():
    rng = np.random.default_rng(5)
    angle = rng.uniform(0, 2 * np.pi, 500)
    radius = np.sqrt(rng.uniform(0, 1, 500))
    points = np.column_stack([radius * np.cos(angle), radius * np.sin(angle), np.full(500, 2.0)])
    f = features_of(points, (0.0, 0.0, 2.0))
    assert f[COLUMN['verticality_e3']] == pytest.approx(np.pi / 2)
    assert f[COLUMN['planarity']] > 0.8


def test_single_point_fill_values():
    f = features_of([[1.0, 1.0, 1.0]], (1.0, 1.0, 1.0))
    assert np.all(np.isfinite(f))
    assert f[COLUMN['n_points']] == 1
    assert np.count_nonzero(f) == 1


def test_features_match_reference_on_random_neighborhoods():
    rng = np.random.default_rng(6)
    for _ in range(200):
        n = int(rng.integers(4, 60))
        points = rng.normal(size=(n, 3)) * rng.uniform(0.01, 3.0, size=3)
        p0 = points[0] + rng.normal(scale=0.1, size=3)
        f = features_of(points, p0)
        assert np.all(np.isfinite(f))
        assert np.allclose(f, reference_features(points, p0), rtol=1e-10, atol=1e-12)


def test_coplanar_neighborhood_has_no_nan():
    rng = np.random.default_rng(7)
    points = np.column_stack([rng.uniform(size=30), np.zeros(30), rng.uniform(size=30)])
    f = features_of(points, points[0])
    assert np.all(np.isfinite(f))
    assert f[COLUMN['sphericity']] == pytest.approx(0.0, abs=1e-12)


def test_shape_ratios_add_up():
    rng = np.random.default_rng(8)
    for _ in range(100):
        points = rng.normal(size=(20, 3)) * rng.uniform(0.1, 2.0, size=3)
        f = features_of(points, points[0])
        ratios = f[[COLUMN['linearity'], COLUMN['planarity'], COLUMN['sphericity']]]
        assert ratios.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all((ratios >= 0) & (ratios <= 1))
        assert 0 <= f[COLUMN['verticality_e1']] <= np.pi / 2


def test_anisotropy_is_one_minus_sphericity():
    rng = np.random.default_rng(9)
    for _ in range(100):
        eig = eigen3(covariance(rng.normal(size=(15, 3))))
        l1, _, l3 = eig.values
        sphericity = features_of_values(eig)[COLUMN['sphericity']]
        assert (l1 - l3) / l1 == pytest.approx(1 - sphericity, abs=1e-12)


def features_of_values(eig):
    return geometric_features([[0.0, 0.0, 0.0]], (0.0, 0.0, 0.0), eig)


def test_eigenvector_sign_does_not_matter():
    rng = np.random.default_rng(10)
    points = rng.normal(size=(25, 3))
    eig = eigen3(covariance(points))
    f = geometric_features(points, points[3], eig)
    for flips in ([-1, 1, 1], [1, -1, 1], [1, 1, -1], [-1, -1, -1]):
        flipped = EigenTriple(eig.values, eig.vectors * np.array(flips))
        assert np.array_equal(geometric_features(points, points[3], flipped), f)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_rigid_motion_keeps_eigen_features(seed):
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(30, 3)) * rng.uniform(0.2, 2.0, size=3)
    p0 = points[0]
    rotation = Rotation.random(random_state=np.random.RandomState(seed % 2**32)).as_matrix()
    shift = rng.uniform(-100, 100, size=3)
    moved = points @ rotation.T + shift
    columns = [COLUMN[name] for name in EIGEN_FEATURES]
    before = features_of(points, p0)[columns]
    after = features_of(moved, rotation @ p0 + shift)[columns]
    assert np.allclose(after, before, rtol=1e-6, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), theta=st.floats(0, 2 * np.pi))
def test_z_rotation_keeps_vertical_features(seed, theta):
    rng = np.random.default_rng(seed)
    points = rng.normal(size=(30, 3)) * rng.uniform(0.2, 2.0, size=3)
    p0 = points[0]
    rz = Rotation.from_euler('z', theta).as_matrix()
    columns = [COLUMN[name] for name in
               ('verticality_e1', 'verticality_e3', 'vertical_moment1', 'vertical_moment2')]
    before = features_of(points, p0)[columns]
    after = features_of(points @ rz.T, rz @ p0)[columns]
    assert np.allclose(after, before, rtol=1e-6, atol=1e-9)


def test_color_features():
    assert np.array_equal(color_features([[1.0, 0.0, 0.0]] * 4), [1, 0, 0, 0, 0, 0])
    assert np.array_equal(color_features([[0.2, 0.4, 0.6]])[3:], [0, 0, 0])
    colors = np.random.default_rng(11).uniform(size=(100, 3))
    expected = np.concatenate([colors.mean(axis=0), colors.var(axis=0, ddof=1)])
    assert np.allclose(color_features(colors), expected, rtol=0, atol=1e-12)


def line_cloud():
    x = np.linspace(0, 1, 21)
    return PointCloud(np.column_stack([x, np.zeros_like(x), np.zeros_like(x)]))


def test_single_scale_row_matches_direct_computation():
    cloud = line_cloud()
    cfg = ScaleConfig(r0=0.3, n_scales=1, rho=5.0)
    pyramid = build_pyramid(cloud, cfg)
    matrix = extract_features(cloud, pyramid, [10])
    assert matrix.values.shape == (1, 18)
    neigh = neighborhood(pyramid, 0, cloud.positions[10])
    assert np.array_equal(matrix.values[0], features_of(neigh.positions, cloud.positions[10]))


def test_color_cloud_columns():
    rng = np.random.default_rng(12)
    cloud = PointCloud(rng.uniform(size=(200, 3)), colors=rng.uniform(size=(200, 3)))
    matrix = extract_features(cloud, build_pyramid(cloud, ScaleConfig(r0=0.1, n_scales=2)))
    assert matrix.values.shape == (200, 48)
    assert matrix.names[18] == 's0_red_mean' and matrix.names[24] == 's1_sum_eigenvalues'


def test_extract_matches_per_point_recomputation():
    rng = np.random.default_rng(13)
    cloud = PointCloud(rng.uniform(0, 3, size=(500, 3)), colors=rng.uniform(size=(500, 3)))
    cfg = ScaleConfig(r0=0.2, n_scales=3, phi=2.0, rho=3.0)
    pyramid = build_pyramid(cloud, cfg)
    matrix = extract_features(cloud, pyramid, chunk_size=64)
    for i in range(0, 500, 25):
        p0 = cloud.positions[i]
        for s in range(3):
            neigh = neighborhood(pyramid, s, p0)
            expected = np.concatenate([features_of(neigh.positions, p0), color_features(neigh.colors)])
            assert np.allclose(matrix.scale_block(s)[i], expected, rtol=1e-12, atol=1e-14)


def test_extraction_independent_of_workers_and_chunks():
    rng = np.random.default_rng(14)
    cloud = PointCloud(rng.uniform(0, 4, size=(3000, 3)))
    pyramid = build_pyramid(cloud, ScaleConfig(r0=0.1, n_scales=4))
    serial = extract_features(cloud, pyramid)
    parallel = extract_features(cloud, pyramid, workers=4)
    assert serial.values.tobytes() == parallel.values.tobytes()


def test_query_index_out_of_range():
    cloud = line_cloud()
    pyramid = build_pyramid(cloud, ScaleConfig(n_scales=1))
    with pytest.raises(ParameterError):
        extract_features(cloud, pyramid, [21])


def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(15)
    cloud = PointCloud(rng.uniform(size=(100, 3)) + 10.0)
    matrix = extract_features(cloud, build_pyramid(cloud, ScaleConfig(r0=0.1, n_scales=2)))
    path = tmp_path / "features.bin"
    save_features(matrix, path)
    header = (tmp_path / "features.bin.hdr").read_text()
    assert "n_cols=36" in header and "feature_names=s0_sum_eigenvalues," in header
    loaded = load_features(path)
    assert loaded.values.tobytes() == matrix.values.tobytes()
    assert loaded.fingerprint == matrix.fingerprint
    assert np.allclose(loaded.origin, matrix.origin)

    export_features_csv(matrix, tmp_path / "features.csv")
    first_line = (tmp_path / "features.csv").read_text().splitlines()[0]
    assert first_line.startswith("s0_sum_eigenvalues,s0_omnivariance")


def test_missing_feature_file(tmp_path):
    with pytest.raises(StorageError):
        load_features(tmp_path / "absent.bin")


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_far_points_only_change_coarse_scales(seed):
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0, 4, size=(4000, 3))
    positions[0] = (2.0, 2.0, 2.0)
    cfg = ScaleConfig(r0=0.15, n_scales=4, phi=2.0, rho=3.0)
    full = PointCloud(positions)
    near = PointCloud(positions[np.linalg.norm(positions - positions[0], axis=1) <= cfg.radii[2]])
    # a fixed grid origin keeps the voxels of both clouds aligned
    before = extract_features(full, build_pyramid(full, cfg, origin=(0, 0, 0)), [0])
    after = extract_features(near, build_pyramid(near, cfg, origin=(0, 0, 0)), [0])
    for s in (0, 1):
        assert np.allclose(before.scale_block(s), after.scale_block(s), rtol=1e-12, atol=1e-14)
    assert before.scale_block(3)[0, COLUMN['n_points']] > after.scale_block(3)[0, COLUMN['n_points']]
