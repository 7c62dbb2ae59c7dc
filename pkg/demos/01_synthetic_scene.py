"""Render a synthetic shoreline tile, write it as a GeoTIFF, and look at what the
depth target and supervision mask become.

    python demos/01_synthetic_scene.py [out_dir]
"""

import sys
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from bathyscope.geodata import make_pair, read_tile, write_tile
from bathyscope.synthscene import OpticsProfile, SceneSpec, gen_depth_field, render_bands

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# a 64 x 64 tile with a land strip on the left and depth growing offshore
depth = gen_depth_field(SceneSpec(seed=3))
optics = OpticsProfile()
tile = render_bands(depth, optics, seed=3)
print("depth range (m):", depth.values.min(), "to", round(float(depth.values.max()), 2))
print("attenuation k (1/m), blue/green/red:", optics.k_att)

# raw digital numbers round-trip through a GeoTIFF with the depth as an extra band
write_tile(out / "scene.tif", tile, depth)
tile_back, depth_back = read_tile(out / "scene.tif")
assert np.array_equal(tile_back.bands, tile.bands)

pair = make_pair(tile_back, depth_back)
water = pair.mask > 0
print("sign s:", pair.sign_s, " d_max:", pair.d_max, " supervised pixels:", int(water.sum()), "of", water.size)

# deeper water is darker in every band, red fastest
for b, name in enumerate(("blue", "green", "red")):
    shallow = pair.x_norm[b][water & (depth.values < 2)].mean()
    deep = pair.x_norm[b][water & (depth.values > 6)].mean()
    print(f"{name:5s} reflectance: {shallow:.3f} under 2 m, {deep:.3f} beyond 6 m")

fig, ax = plt.subplots(1, 3, figsize=(11, 3.4))
rgb = np.clip(pair.x_norm[[2, 1, 0]].transpose(1, 2, 0) / 0.35, 0, 1)
ax[0].imshow(rgb)
ax[0].set_title("RGB (stretched)")
im = ax[1].imshow(depth.values, cmap="viridis")
ax[1].set_title("depth (m)")
fig.colorbar(im, ax=ax[1], fraction=0.046)
ax[2].imshow(pair.mask, cmap="gray")
ax[2].set_title("supervision mask")
for a in ax:
    a.axis("off")
fig.tight_layout()
fig.savefig(out / "scene.png", dpi=100)
print("wrote", out / "scene.tif", "and", out / "scene.png")
