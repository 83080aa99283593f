"""
Plotting and printed reports for classification results.
"""
import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns


def plot_trial_iou_swarm(stats, catalog=None, title="Per-class IoU over trials", path="trial_iou_swarmplot.png"):
    """Swarm plot of the per-trial IoU of every class with mean and std bars."""
    if stats.n_trials == 0:
        print("No trial results to plot")
        return None

    names = [catalog.name(c) if catalog else f"class_{c}" for c in stats.class_ids]
    plot_data = [
        {'Class': name, 'IoU': value}
        for row in stats.trial_iou
        for name, value in zip(names, row)
        if not np.isnan(value)
    ]
    if not plot_data:
        print("No plot data generated")
        return None

    fig, ax = plt.subplots(figsize=(10, 6))
    df = pd.DataFrame(plot_data)
    sns.swarmplot(data=df, x='Class', y='IoU', order=names, ax=ax, size=3)

    for i, (mean_val, std_val) in enumerate(zip(stats.mean, stats.std)):
        if np.isnan(mean_val):
            continue
        ax.hlines(mean_val, i - 0.4, i + 0.4, colors='red', linewidth=2, alpha=0.8)
        ax.hlines([mean_val - std_val, mean_val + std_val], i - 0.2, i + 0.2,
                  colors='orange', linewidth=1.5, alpha=0.7)
        ax.text(i, 1.04, f'{mean_val:.3f}±{std_val:.3f}',
                ha='center', va='bottom', fontsize=8,
                bbox=dict(boxstyle='round,pad=0.3', facecolor='white', alpha=0.8))

    ax.set_ylim(min(0.0, df['IoU'].min() - 0.05), 1.12)
    ax.set_ylabel("IoU (mean ± std)")
    ax.set_title(f"{title} ({stats.n_trials} trials, mean IoU {stats.mean_iou:.3f})")
    ax.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=300)
    plt.close(fig)
    return path


def plot_rho_sweep(frame, title="Influence of the density parameter", path="rho_sweep.png"):
    """Mean IoU and extraction speed against rho on twin axes."""
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.plot(frame['rho'], frame['mean_iou'], 'o-', color='tab:blue', label='mean IoU')
    ax.set_xlabel("rho (radius / grid cell size)")
    ax.set_ylabel("mean IoU", color='tab:blue')
    ax.grid(True, alpha=0.3)

    speed_ax = ax.twinx()
    speed_ax.plot(frame['rho'], frame['points_per_second'], 's--', color='tab:orange', label='points/s')
    speed_ax.set_ylabel("feature extraction (points/s)", color='tab:orange')
    speed_ax.set_yscale('log')

    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=300)
    plt.close(fig)
    return path


def print_iou_table(cm, catalog):
    """Print per-class IoU/F1 and the mean IoU."""
    iou = cm.iou()
    f1 = cm.f1()
    support = cm.counts.sum(axis=1)

    print(f"\n" + "=" * 50)
    print("PER-CLASS IoU")
    print("=" * 50)
    print(f"{'Id':<6} {'Class':<14} {'IoU':<8} {'F1':<8} {'Points':<10}")
    print("-" * 50)
    for class_id, i, f, n in zip(cm.class_ids, iou, f1, support):
        iou_text = 'n/a' if np.isnan(i) else f"{i:.4f}"
        f1_text = 'n/a' if np.isnan(f) else f"{f:.4f}"
        print(f"{class_id:<6} {catalog.name(class_id):<14} {iou_text:<8} {f1_text:<8} {n:<10}")
    print("-" * 50)
    print(f"Mean IoU: {cm.mean_iou():.4f} over {cm.total} scored points")


def print_trial_statistics(stats, catalog=None):
    print(f"\n" + "=" * 50)
    print(f"REPEATED TRIALS (n={stats.n_trials})")
    print("=" * 50)
    for class_id, mean_val, std_val in zip(stats.class_ids, stats.mean, stats.std):
        name = catalog.name(class_id) if catalog else f"class_{class_id}"
        print(f"{name:14s}: {mean_val:.4f}±{std_val:.4f}")
    print(f"{'mean IoU':14s}: {stats.mean_iou:.4f}±{stats.mean_iou_std:.4f}")


def print_mining_history(history):
    print(f"\n" + "=" * 50)
    print("HARD-EXAMPLE MINING")
    print("=" * 50)
    for record in history:
        print(f"round {record.round}: {record.n_train:7d} training points, {record.n_errors:7d} misclassified")
        print(f"         composition {record.composition}")
