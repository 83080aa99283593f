"""
Command-line entry point ``mssf``.

Every subcommand reads the run configuration (preset, ``--config`` file,
then flags), calls the library and writes its results. Human-readable
results go to stdout, logs and errors to stderr. Errors print a single
``error[CODE]: message`` line.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from utils.classifier import (
    balanced_sample, load_model, mine_training_set, predict_proba, save_model, train_forest
)
from utils.cloud_io import load_cloud, load_labels, save_cloud, save_labels
from utils.config import CONVERTERS, load_config_file, resolve_config
from utils.errors import ClassificationError, ModelError, ParameterError
from utils.evaluation import confusion, repeated_trials, rho_sweep, save_metrics_csv
from utils.features import (
    FEATURE_NAMES, build_pyramid, export_features_csv, extract_features, load_features, save_features
)
from utils.plotting import (
    plot_rho_sweep, plot_trial_iou_swarm, print_iou_table, print_mining_history, print_trial_statistics
)
from utils.scenes import generate_synthetic_scene, get_recipe
from utils.spatial import GridSpec, grid_subsample
from utils.strategies import TrainingStrategy

logger = logging.getLogger(__name__)

FLAG_HELP = {
    'strategy': f"training set strategy: {', '.join(s.name for s in TrainingStrategy)}",
    'rhos': "comma-separated rho values for sweep-rho",
    'cell_size': "grid cell size in meters for subsample",
    'trials': "number of repeated trials",
    'queries': "file of point indices to compute, one per line",
}


def _config_parser():
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group("run configuration (overrides --config)")
    group.add_argument('--config', help="flat key=value run configuration file")
    for key in CONVERTERS:
        group.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar=key.upper(),
                           help=FLAG_HELP.get(key))
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help="debug logging")
    verbosity.add_argument('-q', '--quiet', action='store_true', help="warnings and errors only")
    return parser


def build_parser():
    common = _config_parser()
    parser = argparse.ArgumentParser(
        prog='mssf', description="Point cloud classification with multiscale spherical neighborhoods.")
    commands = parser.add_subparsers(dest='command', required=True)

    sub = commands.add_parser('subsample', parents=[common], help="grid-subsample a cloud")
    sub.add_argument('arg_input', nargs='?', metavar='CLOUD')
    sub.add_argument('arg_output', nargs='?', metavar='OUT')
    sub.set_defaults(handler=cmd_subsample)

    sub = commands.add_parser('features', parents=[common], help="extract multiscale features")
    sub.add_argument('arg_input', nargs='?', metavar='CLOUD')
    sub.add_argument('arg_output', nargs='?', metavar='FEATURES')
    sub.add_argument('--csv', help="also export the features as CSV")
    sub.set_defaults(handler=cmd_features)

    sub = commands.add_parser('train', parents=[common], help="train a random forest")
    sub.add_argument('arg_features', nargs='?', metavar='FEATURES')
    sub.add_argument('arg_labels', nargs='?', metavar='LABELS')
    sub.add_argument('arg_model', nargs='?', metavar='MODEL')
    sub.set_defaults(handler=cmd_train)

    sub = commands.add_parser('predict', parents=[common], help="predict labels from features or a cloud")
    sub.add_argument('arg_input', nargs='?', metavar='FEATURES_OR_CLOUD')
    sub.add_argument('arg_model', nargs='?', metavar='MODEL')
    sub.add_argument('arg_output', nargs='?', metavar='LABELS_OUT')
    sub.add_argument('--proba', help="write per-class probabilities as CSV")
    sub.set_defaults(handler=cmd_predict)

    sub = commands.add_parser('evaluate', parents=[common], help="score predicted labels")
    sub.add_argument('arg_truth', metavar='TRUTH')
    sub.add_argument('arg_pred', metavar='PRED')
    sub.set_defaults(handler=cmd_evaluate)

    sub = commands.add_parser('sweep-rho', parents=[common], help="mean IoU and speed against rho")
    sub.add_argument('arg_train', metavar='TRAIN_CLOUD')
    sub.add_argument('arg_test', metavar='TEST_CLOUD')
    sub.add_argument('--plot', help="save the sweep figure here")
    sub.set_defaults(handler=cmd_sweep_rho)

    sub = commands.add_parser('synth', parents=[common], help="generate a labeled synthetic scene")
    sub.add_argument('arg_recipe', metavar='RECIPE', help="recipe name (street-v1) or .json file")
    sub.add_argument('arg_output', nargs='?', metavar='OUT')
    sub.add_argument('--labels-out', help="also write the labels as a label file")
    sub.set_defaults(handler=cmd_synth)

    sub = commands.add_parser('trials', parents=[common], help="repeated balanced-sample trials")
    sub.add_argument('arg_features', nargs='?', metavar='FEATURES')
    sub.add_argument('arg_labels', nargs='?', metavar='LABELS')
    sub.add_argument('--plot', help="save the per-trial swarm plot here")
    sub.set_defaults(handler=cmd_trials)
    return parser


def _path(value, fallback, what):
    path = value or fallback
    if not path:
        raise ParameterError(f"missing {what} path")
    return path


def _run_config(args):
    file_values = load_config_file(args.config) if args.config else {}
    return resolve_config(file_values, {key: getattr(args, key) for key in CONVERTERS})


def cmd_subsample(args, run):
    cloud = load_cloud(_path(args.arg_input, run.cloud, "input cloud"))
    if run.cell_size is None:
        raise ParameterError("subsample needs a cell size (--cell-size or cell_size=)")
    grid = GridSpec.anchored(cloud, run.cell_size)
    subsampled = grid_subsample(cloud, grid)
    save_cloud(subsampled, _path(args.arg_output, run.output, "output cloud"))
    print(f"{len(cloud)} points -> {len(subsampled)} points (cell size {grid.cell_size:g} m)")


def cmd_features(args, run):
    cloud = load_cloud(_path(args.arg_input, run.cloud, "input cloud"))
    queries = load_labels(run.queries) if run.queries else None
    pyramid = build_pyramid(cloud, run.scale_config)
    matrix = extract_features(cloud, pyramid, queries, workers=run.threads)
    save_features(matrix, _path(args.arg_output, run.features, "feature output"))
    if args.csv:
        export_features_csv(matrix, args.csv)
    print(f"{matrix.values.shape[0]} rows x {matrix.values.shape[1]} features ({matrix.fingerprint})")


def cmd_train(args, run):
    features = load_features(_path(args.arg_features, run.features, "feature"))
    labels = load_labels(_path(args.arg_labels, run.labels, "label"))
    if len(labels) != len(features):
        raise ParameterError(f"{len(features)} feature rows but {len(labels)} labels")
    classes, counts = np.unique(labels, return_counts=True)
    logger.info("Class histogram: %s", dict(zip(classes.tolist(), counts.tolist())))
    catalog = run.catalog(labels)

    strategy = run.training_strategy
    if strategy == TrainingStrategy.mine:
        result = mine_training_set(features, labels, run.forest_config, run.mining_config,
                                   catalog.ignored_id, run.threads)
        model, n_train = result.model, len(result.selected)
        print_mining_history(result.history)
    else:
        rows = balanced_sample(labels, run.n_per_class, catalog.ignored_id, run.sampling_seed)
        model = train_forest(features.take(rows), labels[rows], run.forest_config, run.threads)
        n_train = len(rows)
    save_model(model, _path(args.arg_model, run.model, "model"))
    print(f"trained {len(model.trees)} trees on {n_train} points ({strategy.name})")


def _features_for(model, path, run):
    if Path(f"{path}.hdr").is_file():
        return load_features(path)
    if model.scale_config is None:
        raise ModelError("model carries no scale configuration, predict from a feature file instead")
    cloud = load_cloud(path)
    if model.per_scale == len(FEATURE_NAMES):
        cloud = cloud.without_colors()
    return extract_features(cloud, build_pyramid(cloud, model.scale_config), workers=run.threads)


def cmd_predict(args, run):
    model = load_model(_path(args.arg_model, run.model, "model"))
    source = _path(args.arg_input, run.features or run.cloud, "feature or cloud")
    proba = predict_proba(model, _features_for(model, source, run), run.threads)
    labels = model.classes[np.argmax(proba, axis=1)]
    save_labels(labels, _path(args.arg_output, run.output, "label output"))
    if args.proba:
        pd.DataFrame(proba, columns=[str(c) for c in model.classes]).to_csv(
            args.proba, index=False, float_format='%.17g')
    classes, counts = np.unique(labels, return_counts=True)
    print(f"predicted {len(labels)} points: {dict(zip(classes.tolist(), counts.tolist()))}")


def cmd_evaluate(args, run):
    truth = load_labels(args.arg_truth)
    pred = load_labels(args.arg_pred)
    catalog = run.catalog(truth)
    cm = confusion(truth, pred, catalog)
    print_iou_table(cm, catalog)
    if run.output:
        save_metrics_csv(cm, catalog, run.output)


def cmd_sweep_rho(args, run):
    train_cloud = load_cloud(args.arg_train)
    test_cloud = load_cloud(args.arg_test)
    catalog = run.catalog(train_cloud.labels) if train_cloud.has_labels else None
    frame = rho_sweep(train_cloud, test_cloud, run.rho_values, run.scale_config, run.forest_config,
                      run.n_per_class, run.sampling_seed, catalog, run.threads)
    print(frame.to_string(index=False))
    if run.output:
        frame.to_csv(run.output, index=False, float_format='%.6f')
    if args.plot:
        plot_rho_sweep(frame, path=args.plot)


def cmd_synth(args, run):
    recipe = get_recipe(args.arg_recipe)
    cloud = generate_synthetic_scene(recipe, run.seed)
    save_cloud(cloud, _path(args.arg_output, run.output or run.cloud, "output cloud"))
    if args.labels_out:
        save_labels(cloud.labels, args.labels_out)
    classes, counts = np.unique(cloud.labels, return_counts=True)
    print(f"{recipe.name} seed {run.seed}: {len(cloud)} points {dict(zip(classes.tolist(), counts.tolist()))}")


def cmd_trials(args, run):
    features = load_features(_path(args.arg_features, run.features, "feature"))
    labels = load_labels(_path(args.arg_labels, run.labels, "label"))
    catalog = run.catalog(labels)
    stats = repeated_trials(features, labels, run.n_per_class, run.trials, run.forest_config,
                            run.trials_seed, catalog, run.threads)
    print_trial_statistics(stats, catalog)
    if run.output:
        stats.to_frame(catalog).to_csv(run.output, index=False, float_format='%.6f', na_rep='nan')
    if args.plot:
        plot_trial_iou_swarm(stats, catalog, path=args.plot)


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s', stream=sys.stderr, force=True)
    try:
        run = _run_config(args)
        args.handler(args, run)
    except ClassificationError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[E_IO]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
