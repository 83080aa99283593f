"""
Confusion matrices, IoU/F1 and the repeated-trials protocol.
"""
import numpy as np
import pandas as pd
import pytest

from utils.classifier import ForestConfig, balanced_sample, predict, train_forest
from utils.cloud_io import ClassCatalog
from utils.errors import ParameterError
from utils.evaluation import (
    ConfusionMatrix, TrialStats, confusion, f1_score, f1_to_iou, iou_per_class, mean_iou, metrics_frame,
    repeated_trials, rho_sweep, save_metrics_csv
)
from utils.features import ScaleConfig, build_pyramid, extract_features
from utils.scenes import Primitive, SceneRecipe, generate_synthetic_scene

CATALOG = ClassCatalog.parse("0:unclassified,1:ground,2:car,3:pole")


def test_perfect_prediction():
    truth = np.array([1, 1, 2, 3, 3, 3])
    cm = confusion(truth, truth, CATALOG)
    assert np.array_equal(cm.iou(), [1.0, 1.0, 1.0])
    assert cm.mean_iou() == 1.0
    assert cm.total == 6


def test_confusion_counts_and_iou():
    truth = np.array([1, 1, 1, 2, 2, 3])
    pred = np.array([1, 1, 2, 2, 3, 3])
    cm = confusion(truth, pred, CATALOG)
    assert cm.counts.tolist() == [[2, 1, 0], [0, 1, 1], [0, 0, 1]]
    assert cm.class_ids == (1, 2, 3)
    # ground 2/3, car 1/3, pole 1/2
    assert np.allclose(cm.iou(), [2 / 3, 1 / 3, 1 / 2])
    assert mean_iou(cm) == pytest.approx((2 / 3 + 1 / 3 + 1 / 2) / 3)


def test_ignored_points_are_not_scored():
    truth = np.array([0, 0, 1, 2])
    pred = np.array([1, 2, 1, 0])
    cm = confusion(truth, pred, CATALOG)
    assert cm.total == 1
    assert cm.counts[0, 0] == 1


def test_absent_class_has_no_iou():
    truth = np.array([1, 1, 2])
    cm = confusion(truth, truth, CATALOG)
    iou = iou_per_class(cm)
    assert np.isnan(iou[2])
    assert mean_iou(cm) == 1.0


def test_class_never_predicted_scores_zero():
    cm = confusion(np.array([1, 2]), np.array([1, 1]), CATALOG)
    assert cm.iou()[1] == 0.0
    assert cm.iou()[0] == 0.5


def test_unknown_ids_and_length_mismatch():
    with pytest.raises(ParameterError, match="not in the catalog"):
        confusion(np.array([1, 7]), np.array([1, 1]), CATALOG)
    with pytest.raises(ParameterError):
        confusion(np.array([1, 2]), np.array([1]), CATALOG)


def test_iou_is_bounded_by_f1():
    rng = np.random.default_rng(0)
    for _ in range(200):
        cm = ConfusionMatrix(rng.integers(0, 50, size=(4, 4)), (1, 2, 3, 4))
        iou = cm.iou()
        f1 = cm.f1()
        assert np.all((iou >= 0) & (iou <= 1))
        assert np.all(iou <= f1 + 1e-12)
        assert np.allclose(f1_to_iou(f1), iou)


def test_f1_to_iou_conversion():
    assert f1_to_iou(2 / 3) == pytest.approx(0.5)
    assert f1_to_iou(1.0) == 1.0
    assert f1_to_iou(0.0) == 0.0
    assert isinstance(f1_to_iou(0.5), float)
    for bad in (-0.1, 1.5, float('nan')):
        with pytest.raises(ParameterError):
            f1_to_iou(bad)


def test_f1_score_matches_counts():
    assert float(f1_score(1, 1, 0)) == pytest.approx(2 / 3)
    assert np.isnan(f1_score(0, 0, 0))


def test_metrics_frame_and_csv(tmp_path):
    cm = confusion(np.array([1, 1, 2, 3]), np.array([1, 2, 2, 3]), CATALOG)
    frame = metrics_frame(cm, CATALOG)
    assert frame['class'].tolist() == ['1', '2', '3', 'mean']
    assert frame['name'].tolist()[:3] == ['ground', 'car', 'pole']
    assert frame['iou'].iloc[-1] == pytest.approx(cm.mean_iou())
    assert frame['support'].tolist() == [2, 1, 1, 4]

    path = tmp_path / "metrics.csv"
    save_metrics_csv(cm, CATALOG, path)
    loaded = pd.read_csv(path)
    assert list(loaded.columns) == ['class', 'name', 'iou', 'f1', 'support']
    assert len(loaded) == 4


def test_trial_stats_use_population_std():
    stats = TrialStats((1, 2), np.array([[0.5, 1.0], [0.7, np.nan], [0.9, 0.8]]))
    assert stats.n_trials == 3
    assert np.allclose(stats.mean, [0.7, 0.9])
    assert np.allclose(stats.std, [np.std([0.5, 0.7, 0.9]), 0.1])
    assert np.allclose(stats.trial_mean_iou, [0.75, 0.7, 0.85])
    assert stats.mean_iou == pytest.approx(np.mean([0.75, 0.7, 0.85]))
    frame = stats.to_frame()
    assert frame['class'].tolist() == ['1', '2', 'mean']
    two = TrialStats((1,), np.array([[0.6], [0.9]]))
    assert two.std[0] == pytest.approx(0.15)


def _trial_data(seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat([1, 2, 3], 200)
    centers = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0]], dtype=float)
    return centers[labels - 1] + rng.normal(size=(600, 3)), labels


def test_repeated_trials_is_reproducible():
    X, y = _trial_data()
    catalog = ClassCatalog.parse("1:a,2:b,3:c")
    first = repeated_trials(X, y, n_per_class=30, trials=3, forest_cfg=ForestConfig(n_trees=10), seed=5,
                            catalog=catalog)
    second = repeated_trials(X, y, n_per_class=30, trials=3, forest_cfg=ForestConfig(n_trees=10), seed=5,
                             catalog=catalog, workers=2)
    assert first.trial_iou.shape == (3, 3)
    assert np.array_equal(first.trial_iou, second.trial_iou)
    assert first.mean_iou > 0.6
    # trials draw different training sets
    assert not np.array_equal(first.trial_iou[0], first.trial_iou[1])


def test_repeated_trials_validation():
    X, y = _trial_data()
    with pytest.raises(ParameterError):
        repeated_trials(X, y, trials=1)
    with pytest.raises(ParameterError):
        repeated_trials(X, y[:-1], trials=2)
    with pytest.raises(ParameterError, match="no labeled points"):
        repeated_trials(X, y, trials=2, catalog=ClassCatalog.parse("1:a,2:b,3:c,4:d"))


def test_confusion_matches_naive_count():
    rng = np.random.default_rng(1)
    truth = rng.integers(0, 4, size=1000)
    pred = rng.integers(0, 4, size=1000)
    cm = confusion(truth, pred, CATALOG)
    naive = np.zeros((3, 3), dtype=int)
    for t, p in zip(truth, pred):
        if t != 0 and p != 0:
            naive[t - 1, p - 1] += 1
    assert np.array_equal(cm.counts, naive)
    assert cm.total == np.sum((truth != 0) & (pred != 0))


def test_all_points_ignored_gives_zero_matrix():
    cm = confusion(np.zeros(5, dtype=int), np.array([1, 2, 3, 1, 2]), CATALOG)
    assert cm.total == 0
    assert np.isnan(cm.mean_iou())


def test_mean_iou_ignores_class_relabeling():
    rng = np.random.default_rng(2)
    truth = rng.integers(1, 4, size=500)
    pred = np.where(rng.uniform(size=500) < 0.7, truth, rng.integers(1, 4, size=500))
    relabel = np.array([0, 30, 10, 20])
    renamed = ClassCatalog.parse("30:ground,10:car,20:pole")
    assert confusion(relabel[truth], relabel[pred], renamed).mean_iou() == pytest.approx(
        confusion(truth, pred, CATALOG).mean_iou(), abs=1e-15)


def test_single_rho_sweep_matches_standalone_run():
    recipe = SceneRecipe('yard', (Primitive('plane', 1, (0, 0, 0), (4, 4), density=40.0),
                                  Primitive('pole', 2, (0, 0, 0), (0.1, 2.0), density=300.0)),
                         ((1, 'ground'), (2, 'pole')), colors=False)
    train_cloud = generate_synthetic_scene(recipe, 1)
    test_cloud = generate_synthetic_scene(recipe, 2)
    cfg = ScaleConfig(r0=0.2, n_scales=2)
    forest_cfg = ForestConfig(n_trees=5, seed=3)

    frame = rho_sweep(train_cloud, test_cloud, [cfg.rho], cfg, forest_cfg, n_per_class=100, seed=4,
                      catalog=recipe.catalog)

    rows = balanced_sample(train_cloud.labels, 100, 0, seed=4)
    train = extract_features(train_cloud, build_pyramid(train_cloud, cfg), rows)
    model = train_forest(train, train_cloud.labels[rows], forest_cfg)
    test = extract_features(test_cloud, build_pyramid(test_cloud, cfg))
    cm = confusion(test_cloud.labels, predict(model, test), recipe.catalog)

    assert len(frame) == 1
    assert frame['rho'].iloc[0] == cfg.rho
    assert frame['mean_iou'].iloc[0] == cm.mean_iou()
    assert frame['points_per_second'].iloc[0] > 0
