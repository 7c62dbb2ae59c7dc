"""Leave-one-band-out on a region where red light dies out within a meter.

The optics are planted so the red band holds no depth signal past 1 m; a
model trained there should lose more accuracy without green than without red.

    python demos/03_band_importance.py [seed]
"""

import sys

import torch

from bathyscope.diagnostics import lobo
from bathyscope.net import NetConfig
from bathyscope.synthscene import RegionProfile, SceneSpec, make_tiles, planted_lobo_optics
from bathyscope.trainer import TrainSpec, evaluate, train

torch.set_num_threads(1)
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

optics = planted_lobo_optics()
print("attenuation k (1/m), blue/green/red:", optics.k_att)
tiles = [t.pair for t in make_tiles(RegionProfile(optics, SceneSpec(seed=100 + seed)), 30)]
model, _ = train(tiles[:20], NetConfig(seed=seed), TrainSpec(epochs=15, seed=seed))
print(f"held-out R2: {evaluate(model, tiles[20:]).r2:.3f}")

rep = lobo(model, tiles[20:])
print(f"baseline RMSE {rep.baseline_rmse_m:.3f} m")
for name, d, r in zip(("blue", "green", "red"), rep.delta_rmse_m, rep.rank):
    print(f"  without {name:5s}: RMSE +{d:.3f} m (rank {r})")
