"""
Scoring of predicted labels and the two experiment protocols.

IoU of class i is TP / (TP + FP + FN) read off the confusion matrix; a
class absent from both truth and prediction has no IoU and is left out of
the mean. F1 = 2TP / (2TP + FP + FN) converts to IoU as F1 / (2 - F1).
"""
import logging
import time
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from tqdm import tqdm

from utils.classifier import ForestConfig, balanced_sample, predict, select_rows, train_forest
from utils.cloud_io import ClassCatalog
from utils.errors import ParameterError
from utils.features import OUTDOOR, build_pyramid, extract_features

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """``counts[i, j]``: points of class ``class_ids[i]`` predicted as ``class_ids[j]``."""
    counts: np.ndarray
    class_ids: tuple

    @property
    def total(self):
        return int(self.counts.sum())

    def iou(self):
        return iou_per_class(self)

    def f1(self):
        return f1_per_class(self)

    def mean_iou(self):
        return mean_iou(self)


def confusion(truth, pred, catalog):
    """Count (truth, prediction) pairs over the catalog's scored classes.

    Points whose truth or prediction is the ignored id are not scored.
    """
    truth = np.asarray(truth).reshape(-1)
    pred = np.asarray(pred).reshape(-1)
    if len(truth) != len(pred):
        raise ParameterError(f"{len(truth)} truth labels but {len(pred)} predictions")
    ids = np.asarray(catalog.ids, dtype=np.int64)
    k = len(ids)
    scored = (truth != catalog.ignored_id) & (pred != catalog.ignored_id)
    order = np.argsort(ids)
    sorted_ids = ids[order]

    def position(values):
        found = np.searchsorted(sorted_ids, values)
        valid = found < k
        valid[valid] = sorted_ids[found[valid]] == values[valid]
        if not valid.all():
            unknown = sorted(set(values[~valid].tolist()))
            raise ParameterError(f"class ids {unknown} are not in the catalog")
        return order[found]

    rows = position(truth[scored].astype(np.int64))
    cols = position(pred[scored].astype(np.int64))
    counts = np.bincount(rows * k + cols, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts.astype(np.int64), tuple(int(c) for c in ids))


def _counts(cm):
    return np.asarray(cm.counts if isinstance(cm, ConfusionMatrix) else cm, dtype=np.float64)


def _tp_fp_fn(cm):
    counts = _counts(cm)
    tp = np.diag(counts)
    return tp, counts.sum(axis=0) - tp, counts.sum(axis=1) - tp


def iou_per_class(cm):
    """Per-class IoU, NaN where the class is absent from truth and prediction."""
    tp, fp, fn = _tp_fp_fn(cm)
    denominator = tp + fp + fn
    return np.divide(tp, denominator, out=np.full(len(tp), np.nan), where=denominator > 0)


def f1_per_class(cm):
    tp, fp, fn = _tp_fp_fn(cm)
    denominator = 2 * tp + fp + fn
    return np.divide(2 * tp, denominator, out=np.full(len(tp), np.nan), where=denominator > 0)


def _nanmean(values):
    values = np.asarray(values, dtype=np.float64)
    defined = values[~np.isnan(values)]
    return float(defined.mean()) if len(defined) else float('nan')


def mean_iou(cm):
    return _nanmean(iou_per_class(cm))


def f1_score(tp, fp, fn):
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    denominator = 2 * tp + fp + fn
    return np.divide(2 * tp, denominator, out=np.full(np.shape(denominator), np.nan), where=denominator > 0)


def f1_to_iou(f1):
    values = np.asarray(f1, dtype=np.float64)
    if np.any(~((values >= 0) & (values <= 1))):
        raise ParameterError(f"F1 must lie in [0, 1], got {f1}")
    iou = values / (2.0 - values)
    return float(iou) if iou.ndim == 0 else iou


def metrics_frame(cm, catalog):
    """Per-class IoU/F1 table with a trailing ``mean`` row."""
    iou = iou_per_class(cm)
    f1 = f1_per_class(cm)
    support = cm.counts.sum(axis=1)
    frame = pd.DataFrame({
        'class': [str(c) for c in cm.class_ids],
        'name': [catalog.name(c) for c in cm.class_ids],
        'iou': iou,
        'f1': f1,
        'support': support,
    })
    mean_row = pd.DataFrame([{'class': 'mean', 'name': '', 'iou': _nanmean(iou), 'f1': _nanmean(f1),
                              'support': int(support.sum())}])
    return pd.concat([frame, mean_row], ignore_index=True)


def save_metrics_csv(cm, catalog, path):
    metrics_frame(cm, catalog).to_csv(path, index=False, float_format='%.6f', na_rep='nan')


@dataclass(frozen=True, eq=False)
class TrialStats:
    """Per-trial IoUs (trials x classes) and their mean/std.

    The std is the population one (``ddof=0``), as ``np.std`` computes it;
    for two trials it is half the absolute difference.
    """
    class_ids: tuple
    trial_iou: np.ndarray

    @staticmethod
    def _mean_std(column):
        defined = column[~np.isnan(column)]
        if len(defined) == 0:
            return float('nan'), float('nan')
        return float(defined.mean()), float(defined.std())

    @property
    def n_trials(self):
        return len(self.trial_iou)

    @property
    def mean(self):
        return np.array([self._mean_std(self.trial_iou[:, i])[0] for i in range(len(self.class_ids))])

    @property
    def std(self):
        return np.array([self._mean_std(self.trial_iou[:, i])[1] for i in range(len(self.class_ids))])

    @property
    def trial_mean_iou(self):
        return np.array([_nanmean(row) for row in self.trial_iou])

    @property
    def mean_iou(self):
        return self._mean_std(self.trial_mean_iou)[0]

    @property
    def mean_iou_std(self):
        return self._mean_std(self.trial_mean_iou)[1]

    def to_frame(self, catalog=None):
        names = [catalog.name(c) if catalog else f"class_{c}" for c in self.class_ids]
        frame = pd.DataFrame({'class': [str(c) for c in self.class_ids], 'name': names,
                              'iou_mean': self.mean, 'iou_std': self.std})
        mean_row = pd.DataFrame([{'class': 'mean', 'name': '', 'iou_mean': self.mean_iou,
                                  'iou_std': self.mean_iou_std}])
        return pd.concat([frame, mean_row], ignore_index=True)


def _trial_seeds(seed, trial):
    sampling, forest = np.random.SeedSequence([seed, trial]).generate_state(2)
    return int(sampling), int(forest)


def repeated_trials(features, labels, n_per_class=1000, trials=20, forest_cfg=ForestConfig(), seed=0,
                    catalog=None, workers=1):
    """Train on a fresh balanced sample and score on the remaining points, ``trials`` times."""
    labels = np.asarray(labels).reshape(-1)
    if trials < 2:
        raise ParameterError(f"need at least 2 trials, got {trials}")
    if len(labels) != len(features):
        raise ParameterError(f"{len(features)} feature rows but {len(labels)} labels")
    catalog = catalog or ClassCatalog.from_labels(labels)
    present = set(np.unique(labels).tolist())
    missing = [c for c in catalog.ids if c not in present]
    if missing:
        raise ParameterError(f"classes {missing} have no labeled points")

    ious = []
    for trial in tqdm(range(trials), desc="trials", disable=None):
        sampling_seed, forest_seed = _trial_seeds(seed, trial)
        train = balanced_sample(labels, n_per_class, catalog.ignored_id, sampling_seed)
        test = np.ones(len(labels), dtype=bool)
        test[train] = False
        model = train_forest(select_rows(features, train), labels[train], replace(forest_cfg, seed=forest_seed),
                             workers)
        pred = predict(model, select_rows(features, np.flatnonzero(test)), workers)
        cm = confusion(labels[test], pred, catalog)
        ious.append(iou_per_class(cm))
        logger.debug("Trial %d: mean IoU %.4f", trial, _nanmean(ious[-1]))
    stats = TrialStats(catalog.ids, np.vstack(ious))
    logger.info("%d trials: mean IoU %.4f +- %.4f", trials, stats.mean_iou, stats.mean_iou_std)
    return stats


def rho_sweep(train_cloud, test_cloud, rho_values, base_cfg=OUTDOOR, forest_cfg=ForestConfig(),
              n_per_class=1000, seed=0, catalog=None, workers=1):
    """Mean IoU and test-cloud extraction speed for each density parameter.

    Returns a DataFrame with columns rho, mean_iou, points_per_second.
    """
    if not train_cloud.has_labels or not test_cloud.has_labels:
        raise ParameterError("both sweep clouds need labels")
    catalog = catalog or ClassCatalog.from_labels(train_cloud.labels)
    train_rows = balanced_sample(train_cloud.labels, n_per_class, catalog.ignored_id, seed)
    rows = []
    for rho in tqdm(list(rho_values), desc="rho", disable=None):
        cfg = replace(base_cfg, rho=float(rho))
        train_features = extract_features(train_cloud, build_pyramid(train_cloud, cfg), train_rows, workers)
        model = train_forest(train_features, train_cloud.labels[train_rows], forest_cfg, workers)

        started = time.perf_counter()
        test_features = extract_features(test_cloud, build_pyramid(test_cloud, cfg), workers=workers)
        elapsed = time.perf_counter() - started

        cm = confusion(test_cloud.labels, predict(model, test_features, workers), catalog)
        rows.append({'rho': cfg.rho, 'mean_iou': mean_iou(cm),
                     'points_per_second': len(test_cloud) / elapsed if elapsed > 0 else float('inf')})
        logger.info("rho=%g: mean IoU %.4f, %.0f points/s", cfg.rho, rows[-1]['mean_iou'],
                    rows[-1]['points_per_second'])
    return pd.DataFrame(rows, columns=['rho', 'mean_iou', 'points_per_second'])
