"""Carry a model to a region with murkier water and a bimodal seabed, and
look at how its error grows with depth.

    python demos/04_cross_region.py [epochs]
"""

import sys

import torch

from bathyscope.diagnostics import cross_region_eval, depth_slope, depth_trend
from bathyscope.net import NetConfig
from bathyscope.synthscene import RegionProfile, SceneSpec, make_tiles, shifted_profile
from bathyscope.trainer import TrainSpec, train

torch.set_num_threads(1)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30

region_a = RegionProfile(scene=SceneSpec(seed=1))
region_b = shifted_profile(region_a)  # attenuation doubled, depths clustered near 1 m and 4 m
print("region A k:", region_a.optics.k_att, " region B k:", region_b.optics.k_att)

tiles_a = [t.pair for t in make_tiles(region_a, 52)]
tiles_b = [t.pair for t in make_tiles(region_b, 20, prefix="b")]
model, _ = train(tiles_a[:32], NetConfig(seed=0), TrainSpec(epochs=epochs))
for name, tiles in (("A (held out)", tiles_a[32:]), ("B", tiles_b)):
    rep, bins = cross_region_eval(model, tiles)
    print(f"region {name}: RMSE {rep.rmse_m:.2f} m, R2 {rep.r2:.2f}, "
          f"MAE-vs-depth Spearman {depth_trend(bins):.2f}, slope {depth_slope(bins):.2f} m/m")
    for lo, hi, n, mae in zip(bins.edges[:-1], bins.edges[1:], bins.count, bins.mae_m):
        if n >= bins.min_count:
            print(f"    {lo:4.2f}-{hi:4.2f} m  n={n:5d}  MAE {mae:.2f} m")
