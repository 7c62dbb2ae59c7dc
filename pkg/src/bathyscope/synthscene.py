"""
Synthetic shallow-water scenes with known bathymetry.

Bottom reflectance is attenuated exponentially through the water column
towards a deep-water reflectance, so each band carries depth information up
to a depth set by its attenuation coefficient. Everything is deterministic
given a seed.
"""

from dataclasses import dataclass, field, replace
from typing import List, Sequence, Tuple

import numpy as np
import yaml
from affine import Affine
from scipy import ndimage

from .geodata import DEFAULT_DMAX, DEFAULT_SCALE, DepthRaster, RasterTile, SupervisionPair, make_pair

DEPTH_MODES = ("ramp", "smooth_field", "bimodal")
GLINT_BOOST = 0.3
UNDULATION = 0.5  # relative to the offshore slope; keeps depth from being a function of position
PIXEL_SIZE_M = 10.0
DEFAULT_CRS = "EPSG:32636"


@dataclass
class OpticsProfile:
    """Per-band water-column optics (band order B0=Blue, B1=Green, B2=Red).

    Default attenuation is ordered green < blue < red.
    """

    k_att: Tuple[float, ...] = (0.25, 0.06, 0.5)
    albedo_mean: Tuple[float, ...] = (0.22, 0.30, 0.28)
    albedo_var: Tuple[float, ...] = (0.0006, 0.0009, 0.0009)
    r_inf: Tuple[float, ...] = (0.06, 0.04, 0.01)
    glint_frac: float = 0.0
    noise_sigma: float = 0.002

    def __post_init__(self):
        self.k_att = tuple(float(k) for k in self.k_att)
        self.albedo_mean = tuple(float(a) for a in self.albedo_mean)
        self.albedo_var = tuple(float(a) for a in self.albedo_var)
        self.r_inf = tuple(float(r) for r in self.r_inf)
        n = len(self.k_att)
        if not (len(self.albedo_mean) == len(self.albedo_var) == len(self.r_inf) == n):
            raise ValueError("optics fields must have one entry per band")
        if any(k <= 0 for k in self.k_att):
            raise ValueError(f"k_att must be positive, got {self.k_att}")
        if any(not 0 <= r < 1 for r in self.r_inf):
            raise ValueError(f"r_inf must lie in [0, 1), got {self.r_inf}")

    @property
    def n_bands(self):
        return len(self.k_att)


@dataclass
class SceneSpec:
    size: Tuple[int, int] = (64, 64)
    depth_range: Tuple[float, float] = (0.0, 10.0)
    depth_mode: str = "smooth_field"
    shoreline: bool = True
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        self.depth_range = tuple(float(d) for d in self.depth_range)
        if self.depth_mode not in DEPTH_MODES:
            raise ValueError(f"depth_mode must be one of {DEPTH_MODES}, got {self.depth_mode!r}")
        lo, hi = self.depth_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid depth_range {self.depth_range}")
        if lo == hi and self.depth_mode != "ramp":
            raise ValueError("degenerate depth_range is only allowed for ramp mode")


@dataclass
class RegionProfile:
    optics: OpticsProfile = field(default_factory=OpticsProfile)
    scene: SceneSpec = field(default_factory=SceneSpec)


@dataclass
class SynthTile:
    tile_id: str
    tile: RasterTile
    depth: DepthRaster
    pair: SupervisionPair


def _smooth_noise(rng, size, scale):
    """Zero-mean, unit-std low-pass random field with correlation length ``scale``."""
    f = ndimage.gaussian_filter(rng.standard_normal(size), sigma=scale, mode="wrap")
    f -= f.mean()
    sd = f.std()
    return f / sd if sd > 0 else f


def _land_columns(spec):
    return max(1, spec.size[1] // 8) if spec.shoreline else 0


def gen_depth_field(spec: SceneSpec) -> DepthRaster:
    """Generate a depth raster (positive meters, 0 on land).

    ramp: depth grows linearly with column index over ``depth_range``.
    smooth_field: a shore-normal slope plus smooth undulation, rescaled to the range.
    bimodal: smooth blobs split into shallow/deep clusters centered at 20% and
    80% of the range.
    With ``shoreline`` the leftmost W/8 columns are land (depth 0).
    """
    h, w = spec.size
    lo, hi = spec.depth_range
    span = hi - lo
    rng = np.random.default_rng(spec.seed)
    land = _land_columns(spec)
    cols = np.arange(w)

    if spec.depth_mode == "ramp":
        d = np.broadcast_to(lo + span * cols / max(w - 1, 1), (h, w)).copy()
    elif spec.depth_mode == "smooth_field":
        yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
        tilt = rng.uniform(-0.4, 0.4)
        plane = xx + tilt * yy
        field_ = plane + UNDULATION * _smooth_noise(rng, (h, w), w / 8)
        field_ -= field_.min()
        d = lo + span * field_ / field_.max()
    else:
        blobs = _smooth_noise(rng, (h, w), w / 8)
        deep = blobs > np.median(blobs)
        wobble = 0.07 * span * _smooth_noise(rng, (h, w), w / 16)
        d = np.where(deep, lo + 0.8 * span, lo + 0.2 * span) + wobble
        d = np.clip(d, lo, hi)
    if land:
        d[:, :land] = 0.0
    return DepthRaster(values=d, source="synthetic")


def reflectance(depth, albedo, k_att, r_inf):
    """Attenuated bottom reflectance: (A - r_inf) * exp(-2 k z) + r_inf."""
    return (albedo - r_inf) * np.exp(-2.0 * k_att * depth) + r_inf


def render_bands(depth: DepthRaster, optics: OpticsProfile, seed=0, land=None):
    """Render raw digital numbers (reflectance x 1e4) for a depth raster.

    Land pixels (depth 0 unless ``land`` is given) show bare albedo and never
    receive glint.
    """
    z = np.asarray(depth.values, dtype=np.float64)
    if (z < 0).any():
        raise ValueError("render_bands expects non-negative depths")
    h, w = z.shape
    rng = np.random.default_rng(seed)
    if land is None:
        land = z == 0
    substrate = _smooth_noise(rng, (h, w), w / 8)
    bands = np.empty((optics.n_bands, h, w))
    for b in range(optics.n_bands):
        a = optics.albedo_mean[b] + np.sqrt(optics.albedo_var[b]) * substrate
        a = np.clip(a, optics.r_inf[b], 1.0)
        r = reflectance(z, a, optics.k_att[b], optics.r_inf[b])
        bands[b] = np.where(land, a, r)
    if optics.glint_frac > 0:
        water = np.flatnonzero(~land)
        n = int(round(optics.glint_frac * water.size))
        hit = rng.choice(water, size=n, replace=False) if n else np.array([], dtype=int)
        bands.reshape(optics.n_bands, -1)[:, hit] += GLINT_BOOST
    if optics.noise_sigma > 0:
        bands += rng.normal(0.0, optics.noise_sigma, size=bands.shape)
    dn = np.round(DEFAULT_SCALE * np.clip(bands, 0.0, 1.0))
    names = tuple(f"B{i}" for i in range(optics.n_bands))
    affine = Affine(PIXEL_SIZE_M, 0.0, 500000.0, 0.0, -PIXEL_SIZE_M, 3870000.0)
    return RasterTile(bands=dn, band_names=names, affine=affine, crs_id=DEFAULT_CRS, nodata=None)


def make_tiles(profile: RegionProfile, n_tiles, prefix="tile", d_max=DEFAULT_DMAX,
               glint_z=None, glint_window=7) -> List[SynthTile]:
    """Generate ``n_tiles`` independent tiles for one region."""
    tiles = []
    for i in range(n_tiles):
        ss = np.random.SeedSequence([profile.scene.seed, i])
        depth_seed, render_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
        spec = replace(profile.scene, seed=depth_seed)
        depth = gen_depth_field(spec)
        tile = render_bands(depth, profile.optics, seed=render_seed)
        tid = f"{prefix}_{i:03d}"
        pair = make_pair(tile, depth, d_max=d_max, glint_z=glint_z,
                         glint_window=glint_window, tile_id=tid)
        tiles.append(SynthTile(tid, tile, depth, pair))
    return tiles


def make_region_pair(profile_a: RegionProfile, profile_b: RegionProfile, n_tiles,
                     d_max=DEFAULT_DMAX, glint_z=None, glint_window=7):
    """Two regions for cross-region studies: A for training, B for evaluation.

    The profiles must differ in attenuation, depth mode or albedo statistics.
    ``n_tiles`` may be an int or an (n_a, n_b) pair.
    """
    oa, ob = profile_a.optics, profile_b.optics
    if (oa.k_att == ob.k_att and oa.albedo_mean == ob.albedo_mean and oa.albedo_var == ob.albedo_var
            and profile_a.scene.depth_mode == profile_b.scene.depth_mode):
        raise ValueError("region profiles must differ in k_att, depth_mode or albedo statistics")
    n_a, n_b = (n_tiles, n_tiles) if np.isscalar(n_tiles) else n_tiles
    kw = dict(d_max=d_max, glint_z=glint_z, glint_window=glint_window)
    return (make_tiles(profile_a, n_a, prefix="a", **kw),
            make_tiles(profile_b, n_b, prefix="b", **kw))


def shifted_profile(profile: RegionProfile, k_factor=2.0, depth_mode="bimodal",
                    depth_range=(0.0, 5.0), seed=None) -> RegionProfile:
    """A region with scaled attenuation and a different depth distribution."""
    optics = replace(profile.optics, k_att=tuple(k * k_factor for k in profile.optics.k_att))
    scene = replace(profile.scene, depth_mode=depth_mode, depth_range=depth_range,
                    seed=profile.scene.seed + 1000 if seed is None else seed)
    return RegionProfile(optics, scene)


def planted_lobo_optics(k_red=2.5, **kw) -> OpticsProfile:
    """Optics where red carries < 1% of its bottom signal beyond 1 m depth."""
    base = OpticsProfile(**kw)
    return replace(base, k_att=(base.k_att[0], base.k_att[1], k_red))


# ---------------------------------------------------------------------------
# key-value configuration
# ---------------------------------------------------------------------------

SCENE_KEYS = {"size", "depth_range", "depth_mode", "shoreline", "seed", "glint_frac", "noise_sigma"}
BAND_KEYS = ("k_att", "r_inf", "albedo_mean", "albedo_var")


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def profile_from_mapping(cfg, n_bands=3) -> RegionProfile:
    """Build a RegionProfile from keys such as ``size``, ``k_att.b0`` or ``r_inf.b2``.

    Nested mappings (``k_att: {b0: ...}``) and dotted keys are equivalent.
    Unknown keys raise KeyError.
    """
    flat = _flatten(cfg)
    optics = OpticsProfile()
    per_band = {k: list(getattr(optics, k)) for k in BAND_KEYS}
    scene_kw, optics_kw = {}, {}
    for key, value in flat.items():
        head, _, band = key.partition(".")
        if head in BAND_KEYS and band:
            idx = int(band.lstrip("bB"))
            if not 0 <= idx < n_bands:
                raise KeyError(f"band index out of range in key {key!r}")
            per_band[head][idx] = float(value)
        elif head in BAND_KEYS and isinstance(value, (list, tuple)):
            per_band[head] = [float(v) for v in value]
        elif key in ("glint_frac", "noise_sigma"):
            optics_kw[key] = float(value)
        elif key in SCENE_KEYS:
            scene_kw[key] = value
        else:
            raise KeyError(f"unknown scene key {key!r}")
    if "size" in scene_kw and np.isscalar(scene_kw["size"]):
        scene_kw["size"] = (scene_kw["size"], scene_kw["size"])
    optics = OpticsProfile(**{k: tuple(v) for k, v in per_band.items()}, **optics_kw)
    return RegionProfile(optics=optics, scene=SceneSpec(**scene_kw))


def load_scene_config(path) -> RegionProfile:
    with open(path) as f:
        return profile_from_mapping(yaml.safe_load(f) or {})
