#!/usr/bin/env python3
"""
Density-parameter study: mean IoU and feature extraction speed against rho.
"""
from utils.classifier import ForestConfig
from utils.evaluation import rho_sweep
from utils.features import OUTDOOR
from utils.plotting import plot_rho_sweep
from utils.scenes import STREET_V1, generate_synthetic_scene


def main():
    rho_values = [1, 2, 3, 4, 5]

    print("=" * 60)
    print("RHO SWEEP")
    print("=" * 60)

    train_cloud = generate_synthetic_scene(STREET_V1, 1)
    test_cloud = generate_synthetic_scene(STREET_V1, 2)
    print(f"Training on {len(train_cloud)} points, testing on {len(test_cloud)} points")

    frame = rho_sweep(train_cloud, test_cloud, rho_values, OUTDOOR, ForestConfig(seed=0),
                      catalog=STREET_V1.catalog, workers=4)
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    frame.to_csv("rho_sweep.csv", index=False, float_format='%.6f')
    plot_rho_sweep(frame, title=f"{STREET_V1.name}: influence of rho")

    best = frame.loc[frame['mean_iou'].idxmax()]
    print(f"\nBest mean IoU {best['mean_iou']:.4f} at rho={best['rho']:g}")
    print("Saved rho_sweep.csv and rho_sweep.png")


if __name__ == "__main__":
    main()
