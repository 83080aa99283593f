"""
Random forest classification of feature rows and training-set construction.

Each tree is grown by a Gini decision-tree learner on its own bootstrap
resample and then stored as flat node arrays (feature, threshold, left,
right, leaf class probabilities). Inference, persistence and all
randomness (tree t draws from SeedSequence([seed, t])) live here, so the
model file and the predictions only depend on data, configuration and seed.

Training sets come from one of two strategies:
- balanced: the same number of random points in every class;
- mine: start balanced, then repeatedly retrain after adding a random part
  of the misclassified training points.
"""
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from sklearn.tree import DecisionTreeClassifier

from utils.errors import (
    FingerprintError, ModelError, ParameterError, StorageError, TrainingError
)
from utils.features import FeatureMatrix, ScaleConfig

logger = logging.getLogger(__name__)

MODEL_MAGIC = b'MSSF'
MODEL_VERSION = 1
MODEL_HEADER_KEYS = ('fingerprint', 'n_features', 'classes', 'seed', 'n_trees', 'scale_config', 'per_scale',
                     'forest_config')
PREDICT_CHUNK = 65536


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = 25
    min_samples_leaf: int = 1
    features_per_split: int | None = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ParameterError(f"n_trees must be at least 1, got {self.n_trees}")
        if self.max_depth is not None and self.max_depth < 1:
            raise ParameterError(f"max_depth must be at least 1, got {self.max_depth}")
        if self.min_samples_leaf < 1:
            raise ParameterError(f"min_samples_leaf must be at least 1, got {self.min_samples_leaf}")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ParameterError(f"features_per_split must be at least 1, got {self.features_per_split}")

    def split_width(self, dim):
        """Candidate columns per split, ceil(sqrt(dim)) unless configured."""
        width = self.features_per_split or math.ceil(math.sqrt(dim))
        if not 1 <= width <= dim:
            raise ParameterError(f"features_per_split {width} outside [1, {dim}]")
        return width


@dataclass(frozen=True)
class MiningConfig:
    initial_per_class: int = 1000
    rounds: int = 5
    add_per_round: int | None = None
    budget: int = 50000
    seed: int = 0

    def __post_init__(self):
        if self.initial_per_class < 1 or self.rounds < 1 or self.budget < 1:
            raise ParameterError("initial_per_class, rounds and budget must be positive")
        if self.add_per_round is not None and self.add_per_round < 1:
            raise ParameterError(f"add_per_round must be positive, got {self.add_per_round}")

    @property
    def step(self):
        return self.add_per_round or max(1, self.budget // 10)


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Flat binary tree; ``feature`` is -1 at leaves, rows go left when x <= threshold."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __len__(self):
        return len(self.feature)

    def apply(self, X32):
        """Leaf node reached by every row of a float32 feature matrix."""
        node = np.zeros(len(X32), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            current = node[active]
            go_left = X32[active, self.feature[current]] <= self.threshold[current]
            node[active] = np.where(go_left, self.left[current], self.right[current])
            active = active[self.feature[node[active]] >= 0]
        return node


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple
    classes: np.ndarray
    n_features: int
    fingerprint: str = ''
    seed: int = 0
    scale_config: ScaleConfig | None = None
    per_scale: int | None = None
    forest_config: ForestConfig | None = None

    @property
    def n_classes(self):
        return len(self.classes)


class MiningRound(NamedTuple):
    round: int
    n_train: int
    composition: dict
    n_errors: int


class MiningResult(NamedTuple):
    model: ForestModel
    selected: np.ndarray
    history: list


def gini_impurity(counts):
    """1 - sum(p_k^2) of class counts (or probabilities) along the last axis; 0 for empty nodes."""
    counts = np.asarray(counts, dtype=np.float64)
    totals = counts.sum(axis=-1, keepdims=True)
    p = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    impurity = 1.0 - np.sum(p ** 2, axis=-1)
    return np.where(totals[..., 0] > 0, impurity, 0.0)


def _unpack(X):
    if isinstance(X, FeatureMatrix):
        return X.values, X.fingerprint, X.config, X.per_scale
    values = np.asarray(X, dtype=np.float64)
    if values.ndim != 2:
        raise ParameterError(f"feature matrix must be 2D, got shape {values.shape}")
    return values, '', None, None


def select_rows(X, rows):
    return X.take(rows) if isinstance(X, FeatureMatrix) else np.asarray(X)[rows]


def _flatten(grower, n_classes):
    tree = grower.tree_
    leaf = tree.children_left < 0
    feature = tree.feature.astype(np.int32)
    feature[leaf] = -1
    threshold = tree.threshold.astype(np.float64)
    threshold[leaf] = 0.0
    value = np.zeros((tree.node_count, n_classes))
    value[:, grower.classes_.astype(np.int64)] = tree.value[:, 0, :]
    value /= value.sum(axis=1, keepdims=True)
    return DecisionTree(feature, threshold,
                        tree.children_left.astype(np.int32), tree.children_right.astype(np.int32), value)


def _tree_seeds(seed, tree_index):
    sequence = np.random.SeedSequence([seed, tree_index])
    return np.random.default_rng(sequence), int(sequence.generate_state(1)[0])


def forest_summary(model):
    leaves = [tree.value[tree.feature < 0] for tree in model.trees]
    return {
        'n_trees': len(model.trees),
        'mean_nodes': float(np.mean([len(tree) for tree in model.trees])),
        'mean_leaf_gini': float(np.mean(np.concatenate([gini_impurity(v) for v in leaves]))),
    }


def train_forest(X, y, cfg=ForestConfig(), workers=1):
    """Grow ``cfg.n_trees`` Gini trees on bootstrap resamples of (X, y)."""
    values, fingerprint, scale_config, per_scale = _unpack(X)
    y = np.asarray(y).reshape(-1)
    if len(y) != len(values):
        raise ParameterError(f"{len(values)} feature rows but {len(y)} labels")
    if len(values) == 0:
        raise TrainingError("no training rows")
    classes, y_index = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise TrainingError(f"need at least two classes to train, got {classes.tolist()}")
    width = cfg.split_width(values.shape[1])
    X32 = values.astype(np.float32)
    n = len(values)

    def grow(tree_index):
        rng, tree_seed = _tree_seeds(cfg.seed, tree_index)
        rows = rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
        grower = DecisionTreeClassifier(
            criterion='gini',
            max_depth=cfg.max_depth,
            min_samples_leaf=cfg.min_samples_leaf,
            max_features=width,
            random_state=tree_seed,
        )
        grower.fit(X32[rows], y_index[rows])
        return _flatten(grower, len(classes))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = tuple(pool.map(grow, range(cfg.n_trees)))
    else:
        trees = tuple(grow(t) for t in range(cfg.n_trees))
    model = ForestModel(trees, classes.astype(np.int64), values.shape[1], fingerprint, cfg.seed,
                        scale_config, per_scale, cfg)
    summary = forest_summary(model)
    logger.info("Trained %d trees on %d rows x %d features (%d classes, %.0f nodes/tree, leaf gini %.3f)",
                summary['n_trees'], n, values.shape[1], len(classes), summary['mean_nodes'],
                summary['mean_leaf_gini'])
    return model


def predict_proba(model, X, workers=1):
    """Mean of the leaf class-probability vectors over all trees, columns ordered as ``model.classes``."""
    values, fingerprint, _, _ = _unpack(X)
    if values.shape[1] != model.n_features:
        raise FingerprintError(f"features have {values.shape[1]} columns, model expects {model.n_features}")
    if fingerprint and model.fingerprint and fingerprint != model.fingerprint:
        raise FingerprintError(f"feature layout {fingerprint!r} does not match model {model.fingerprint!r}")
    X32 = values.astype(np.float32)
    proba = np.zeros((len(values), model.n_classes))

    def work(start):
        stop = min(start + PREDICT_CHUNK, len(values))
        block = X32[start:stop]
        for tree in model.trees:
            proba[start:stop] += tree.value[tree.apply(block)]

    starts = range(0, len(values), PREDICT_CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, starts))
    else:
        for start in starts:
            work(start)
    return proba / len(model.trees)


def predict(model, X, workers=1):
    """Most probable class id per row; ties go to the smaller id."""
    return model.classes[np.argmax(predict_proba(model, X, workers), axis=1)]


def balanced_sample(labels, n_per_class, ignored=0, seed=0):
    """Uniformly pick up to ``n_per_class`` indices of every non-ignored class, sorted ascending."""
    labels = np.asarray(labels).reshape(-1)
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be positive, got {n_per_class}")
    classes = [c for c in np.unique(labels) if c != ignored]
    if not classes:
        raise ParameterError("no labeled points to sample from")
    rng = np.random.default_rng(seed)
    picked = []
    for class_id in classes:
        members = np.flatnonzero(labels == class_id)
        if len(members) <= n_per_class:
            if len(members) < n_per_class:
                logger.warning("Class %d has only %d points (< %d), using all of them",
                               class_id, len(members), n_per_class)
            picked.append(members)
        else:
            picked.append(rng.choice(members, size=n_per_class, replace=False))
    return np.sort(np.concatenate(picked))


def _composition(labels):
    classes, counts = np.unique(labels, return_counts=True)
    return {int(c): int(k) for c, k in zip(classes, counts)}


def _sample_errors(candidates, labels, n_add, rng):
    """Pick ``n_add`` candidates, split across classes proportionally to their error counts."""
    classes, counts = np.unique(labels[candidates], return_counts=True)
    quota = n_add * counts / counts.sum()
    alloc = np.floor(quota).astype(np.int64)
    remainder = n_add - int(alloc.sum())
    order = np.lexsort((classes, -(quota - alloc)))
    alloc[order[:remainder]] += 1
    alloc = np.minimum(alloc, counts)
    added = [
        rng.choice(candidates[labels[candidates] == class_id], size=int(k), replace=False)
        for class_id, k in zip(classes, alloc) if k > 0
    ]
    return np.concatenate(added) if added else np.empty(0, dtype=np.int64)


def mine_training_set(X, y, forest_cfg=ForestConfig(), mining_cfg=MiningConfig(), ignored=0, workers=1):
    """Grow a training set by trial and error on the training clouds themselves.

    Round 1 trains on a balanced sample. After every round the forest
    classifies all training points and a random share of the misclassified
    ones (never already selected) joins the set, until ``rounds`` forests
    have been trained, nothing is misclassified, or the budget is reached.
    """
    y = np.asarray(y).reshape(-1)
    selected = balanced_sample(y, mining_cfg.initial_per_class, ignored, mining_cfg.seed)
    if len(selected) > mining_cfg.budget:
        raise ParameterError(f"initial set of {len(selected)} points exceeds the budget of {mining_cfg.budget}")
    rng = np.random.default_rng(np.random.SeedSequence([mining_cfg.seed, 1]))
    scored = y != ignored
    history = []
    for round_index in range(1, mining_cfg.rounds + 1):
        model = train_forest(select_rows(X, selected), y[selected], forest_cfg, workers)
        wrong = scored & (predict(model, X, workers) != y)
        record = MiningRound(round_index, len(selected), _composition(y[selected]), int(wrong.sum()))
        history.append(record)
        logger.info("Mining round %d: %d training points %s, %d misclassified",
                    record.round, record.n_train, record.composition, record.n_errors)
        candidates = np.setdiff1d(np.flatnonzero(wrong), selected, assume_unique=True)
        room = mining_cfg.budget - len(selected)
        if round_index == mining_cfg.rounds or len(candidates) == 0 or room <= 0:
            break
        n_add = min(mining_cfg.step, room, len(candidates))
        selected = np.union1d(selected, _sample_errors(candidates, y, n_add, rng))
    return MiningResult(model, selected, history)


def save_model(model, path):
    """Write the versioned little-endian model file."""
    if not str(path):
        raise StorageError("empty model path")
    header = {
        'fingerprint': model.fingerprint,
        'n_features': int(model.n_features),
        'classes': [int(c) for c in model.classes],
        'seed': int(model.seed),
        'n_trees': len(model.trees),
        'scale_config': asdict(model.scale_config) if model.scale_config else None,
        'per_scale': model.per_scale,
        'forest_config': asdict(model.forest_config) if model.forest_config else None,
    }
    blob = json.dumps(header, sort_keys=True).encode('utf-8')
    try:
        with open(path, 'wb') as handle:
            handle.write(MODEL_MAGIC)
            handle.write(struct.pack('<BI', MODEL_VERSION, len(blob)))
            handle.write(blob)
            for tree in model.trees:
                handle.write(struct.pack('<I', len(tree)))
                handle.write(tree.feature.astype('<i4').tobytes())
                handle.write(tree.threshold.astype('<f8').tobytes())
                handle.write(tree.left.astype('<i4').tobytes())
                handle.write(tree.right.astype('<i4').tobytes())
                handle.write(tree.value.astype('<f8').tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write model {path}: {exc}") from exc


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _check_header(header, path):
    if not isinstance(header, dict):
        raise ModelError(f"{path}: header is not a JSON object")
    missing = [key for key in MODEL_HEADER_KEYS if key not in header]
    if missing:
        raise ModelError(f"{path}: header lacks {', '.join(missing)}")
    classes = header['classes']
    if not isinstance(classes, list) or not classes or not all(_is_int(c) for c in classes):
        raise ModelError(f"{path}: header classes must be a non-empty list of integers")
    for key in ('n_features', 'n_trees', 'seed'):
        if not _is_int(header[key]) or header[key] < 0:
            raise ModelError(f"{path}: header {key} must be a non-negative integer")
    if header['n_trees'] == 0:
        raise ModelError(f"{path}: model has no trees")
    if not isinstance(header['fingerprint'], str):
        raise ModelError(f"{path}: header fingerprint must be a string")
    if header['per_scale'] is not None and not _is_int(header['per_scale']):
        raise ModelError(f"{path}: header per_scale must be an integer or null")
    for key in ('scale_config', 'forest_config'):
        if header[key] is not None and not isinstance(header[key], dict):
            raise ModelError(f"{path}: header {key} must be an object or null")


def load_model(path, expected_fingerprint=None):
    if not str(path):
        raise StorageError("empty model path")
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"no such model file: {path}")
    data = path.read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ModelError(f"{path}: not a model file")
    if len(data) < 9:
        raise ModelError(f"{path}: truncated header")
    version, header_size = struct.unpack_from('<BI', data, 4)
    if version != MODEL_VERSION:
        raise ModelError(f"{path}: model version {version}, this build reads version {MODEL_VERSION}")
    offset = 9 + header_size
    try:
        header = json.loads(data[9:offset].decode('utf-8'))
    except ValueError as exc:
        raise ModelError(f"{path}: corrupt header ({exc})") from exc
    _check_header(header, path)

    n_classes = len(header['classes'])
    trees = []
    try:
        for _ in range(header['n_trees']):
            (n_nodes,) = struct.unpack_from('<I', data, offset)
            offset += 4
            arrays = []
            for dtype, count in (('<i4', n_nodes), ('<f8', n_nodes), ('<i4', n_nodes),
                                 ('<i4', n_nodes), ('<f8', n_nodes * n_classes)):
                arrays.append(np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy())
                offset += count * np.dtype(dtype).itemsize
            feature, threshold, left, right, value = arrays
            trees.append(DecisionTree(feature.astype(np.int32), threshold.astype(np.float64),
                                      left.astype(np.int32), right.astype(np.int32),
                                      value.astype(np.float64).reshape(n_nodes, n_classes)))
    except (struct.error, ValueError) as exc:
        raise ModelError(f"{path}: truncated tree data") from exc
    if offset != len(data):
        raise ModelError(f"{path}: {len(data) - offset} trailing bytes")
    if any(tree.feature.max(initial=-1) >= header['n_features'] for tree in trees):
        raise ModelError(f"{path}: tree references a feature beyond {header['n_features']}")

    try:
        scale_config = ScaleConfig(**header['scale_config']) if header['scale_config'] else None
        forest_config = ForestConfig(**header['forest_config']) if header['forest_config'] else None
    except (TypeError, ValueError) as exc:
        raise ModelError(f"{path}: bad configuration in header ({exc})") from exc
    model = ForestModel(
        tuple(trees), np.array(header['classes'], dtype=np.int64), header['n_features'],
        header['fingerprint'], header['seed'], scale_config, header['per_scale'], forest_config,
    )
    if expected_fingerprint is not None and expected_fingerprint != model.fingerprint:
        raise FingerprintError(f"model fingerprint {model.fingerprint!r} != {expected_fingerprint!r}")
    return model
