"""
Desk-scale run of the whole pipeline on the synthetic street scene.
"""
import numpy as np

from utils.classifier import ForestConfig, MiningConfig, balanced_sample, mine_training_set, predict, train_forest
from utils.config import derive_seed
from utils.evaluation import confusion, repeated_trials
from utils.features import OUTDOOR, build_pyramid, extract_features
from utils.plotting import plot_trial_iou_swarm, print_iou_table, print_mining_history, print_trial_statistics
from utils.scenes import STREET_V1, generate_synthetic_scene
from utils.strategies import TrainingStrategy


def main():
    """Train on one street scene, classify another and compare training strategies."""
    seed, train_seed, test_seed = 0, 1, 2
    n_per_class, n_trials, workers = 1000, 10, 4
    catalog = STREET_V1.catalog

    print("=" * 70)
    print("MULTISCALE SPHERICAL NEIGHBORHOOD CLASSIFICATION")
    print("=" * 70)

    train_cloud = generate_synthetic_scene(STREET_V1, train_seed)
    test_cloud = generate_synthetic_scene(STREET_V1, test_seed)
    print(f"Scene: {STREET_V1.name}, {len(train_cloud)} training / {len(test_cloud)} test points")
    print(f"Scales: {OUTDOOR.n_scales}, radii {', '.join(f'{r:g}' for r in OUTDOOR.radii)} m, rho={OUTDOOR.rho:g}")

    train_features = extract_features(train_cloud, build_pyramid(train_cloud, OUTDOOR), workers=workers)
    test_features = extract_features(test_cloud, build_pyramid(test_cloud, OUTDOOR), workers=workers)
    print(f"Features: {train_features.values.shape[1]} columns ({train_features.fingerprint})")

    forest_cfg = ForestConfig(seed=derive_seed(seed, 'forest'))
    strategy_results = {}
    for strategy in TrainingStrategy:
        print("\n" + "=" * 50)
        print(f"TRAINING STRATEGY: {strategy.name}")
        print("=" * 50)
        if strategy == TrainingStrategy.mine:
            mining_cfg = MiningConfig(initial_per_class=n_per_class, budget=20000, seed=derive_seed(seed, 'mining'))
            result = mine_training_set(train_features, train_cloud.labels, forest_cfg, mining_cfg, workers=workers)
            model, n_train = result.model, len(result.selected)
            print_mining_history(result.history)
        else:
            rows = balanced_sample(train_cloud.labels, n_per_class, catalog.ignored_id, derive_seed(seed, 'sampling'))
            model = train_forest(train_features.take(rows), train_cloud.labels[rows], forest_cfg, workers)
            n_train = len(rows)

        cm = confusion(test_cloud.labels, predict(model, test_features, workers), catalog)
        print_iou_table(cm, catalog)
        strategy_results[strategy.name] = {'mean_iou': cm.mean_iou(), 'n_train': n_train}

    print("\n" + "=" * 50)
    print("STRATEGY COMPARISON")
    print("=" * 50)
    for name, stats in strategy_results.items():
        print(f"{name:8s}: mean IoU {stats['mean_iou']:.4f} (n_train={stats['n_train']})")

    print(f"\nRunning {n_trials} balanced-sample trials on the test scene...")
    stats = repeated_trials(test_features, test_cloud.labels, n_per_class, n_trials, forest_cfg,
                            derive_seed(seed, 'trials'), catalog, workers)
    print_trial_statistics(stats, catalog)
    plot_trial_iou_swarm(stats, catalog, title=f"{STREET_V1.name} per-class IoU")
    print(f"Largest per-class std: {np.nanmax(stats.std):.4f}")

    print("\n" + "=" * 70)
    print("Analysis complete! Check generated PNG files for visualizations.")
    print("=" * 70)


if __name__ == "__main__":
    main()
