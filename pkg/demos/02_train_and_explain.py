"""Train the desk model on one synthetic region, then ask which pixels its
predictions rely on (A-CAM-R) and check that answer with the retention test.

    python demos/02_train_and_explain.py [epochs]

30 epochs (the default) take about two minutes on one CPU core.
"""

import sys

import numpy as np
import torch

from bathyscope.explain import acamr, retention_test
from bathyscope.net import NetConfig
from bathyscope.synthscene import RegionProfile, SceneSpec, make_tiles
from bathyscope.trainer import TrainSpec, evaluate, train

torch.set_num_threads(1)
epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 30

tiles = [t.pair for t in make_tiles(RegionProfile(scene=SceneSpec(seed=1)), 52)]
train_set, test_set = tiles[:32], tiles[32:]

model, history = train(train_set, NetConfig(seed=0), TrainSpec(epochs=epochs))
print("training loss (normalized):", " ".join(f"{r['loss']:.3f}" for r in history[::5]))
report = evaluate(model, test_set)
print(f"held-out tiles: RMSE {report.rmse_m:.3f} m, MAE {report.mae_m:.3f} m, R2 {report.r2:.3f}")

# saliency for one tile: the last decoder block's channels, weighted by how
# much the error grows when each one is switched off
p = test_set[0]
sal = acamr(model, p.x_norm, p.y, p.mask, p.d_max, tile_id=p.tile_id)
print(f"tile {p.tile_id}: E_full {sal.e_full:.3f} m")
for k, (w, e) in enumerate(zip(sal.weights, sal.e_minus)):
    print(f"  channel {k}: E without it {e:.3f} m, weight {w:+.3f}")
water = p.y > 0
print(f"share of saliency over water: {sal.grid[water].sum() / sal.grid.sum():.2f}")

# keep only the top-rho % most salient pixels (the rest set to their mean) and re-predict;
# a faithful map loses more accuracy the less of it is kept
deltas = []
for q in test_set:
    s = acamr(model, q.x_norm, q.y, q.mask, q.d_max)
    deltas.append([row[2] for row in retention_test(model, q.x_norm, q.y, q.mask, s, (20, 30, 50, 100), q.d_max).rows])
for rho, d in zip((20, 30, 50, 100), np.mean(deltas, axis=0)):
    print(f"keep {rho:3d}% of pixels: error up {d:6.1f}% on average")
