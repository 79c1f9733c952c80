"""Sparse LiDAR scans and semi-dense maps with pose noise.

First the ring ladder: dropping every other elevation ring halves the number
of valid pixels. Then scans from neighbouring frames are warped into the
reference view; with perfect poses they agree with the ground truth, and
translation noise turns some of them into outliers.

    python demos/lidar_noise.py --seeds 3
"""

import argparse

import numpy as np

from twise.scenegen import accumulate_semidense, lidar_sample, make_scene, outlier_stats


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--frames", type=int, default=5)
    args = ap.parse_args()

    scene = make_scene({"kind": "composite", "seed": 0})
    print("rings  valid pixels")
    for rows in (64, 32, 16, 8):
        print(f"{rows:5d}  {lidar_sample(scene, rows).valid_count:12d}")

    levels = (0.0, 0.01, 0.02, 0.05)
    frac = np.zeros((args.seeds, len(levels)))
    cover = np.zeros_like(frac)
    for seed in range(args.seeds):
        sample = make_scene({"kind": "slab2d", "seed": seed})
        for k, st in enumerate(levels):
            semi = accumulate_semidense(sample, args.frames, noise=(0.0, st), seed=seed)
            stats = outlier_stats(semi, sample.dense_gt, sample.scene.intrinsics)
            frac[seed, k] = stats.metric_fraction
            cover[seed, k] = stats.coverage
    print("\nsigma_t [m]  outliers > 1 m  coverage [%]")
    for k, st in enumerate(levels):
        print(f"{st:11.2f}  {frac[:, k].mean():14.4%}  {cover[:, k].mean():12.1f}")


if __name__ == "__main__":
    main()
