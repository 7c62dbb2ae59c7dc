"""
Raster ingestion and supervision-target formation.

Band normalization, sign-robust depth scaling, the conservative supervision
mask, glint suppression, pixel-size rescaling of affine transforms and
GeoTIFF exchange.
"""

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import rasterio
from affine import Affine
from rasterio.errors import NotGeoreferencedWarning
from scipy import ndimage

logger = logging.getLogger(__name__)

DEFAULT_SCALE = 1e4
DEFAULT_DMAX = 14.556
DEFAULT_BAND_NAMES = ("B0", "B1", "B2")
BAND_COLORS = {"B0": "Blue", "B1": "Green", "B2": "Red"}
DEPTH_BAND = "depth"


@dataclass
class RasterTile:
    """Multiband grid with georeferencing.

    ``bands`` is C x H x W. ``affine`` maps pixel (col, row) to map
    coordinates.
    """

    bands: np.ndarray
    band_names: Tuple[str, ...] = DEFAULT_BAND_NAMES
    affine: Affine = field(default_factory=Affine.identity)
    crs_id: str = ""
    nodata: Optional[float] = None

    def __post_init__(self):
        self.bands = np.asarray(self.bands)
        if self.bands.ndim == 2:
            self.bands = self.bands[None]
        if self.bands.ndim != 3 or self.bands.shape[0] < 1:
            raise ValueError(f"bands must be C x H x W with C >= 1, got {self.bands.shape}")
        if len(self.band_names) != self.bands.shape[0]:
            self.band_names = tuple(f"B{i}" for i in range(self.bands.shape[0]))
        self.band_names = tuple(self.band_names)

    @property
    def shape(self):
        return self.bands.shape[1:]


@dataclass
class DepthRaster:
    values: np.ndarray
    source: str = "synthetic"  # one of sfm, lidar, synthetic


@dataclass
class SupervisionPair:
    """Normalized network input, target and supervision mask for one tile."""

    x_norm: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    d_max: float = DEFAULT_DMAX
    sign_s: int = 1
    tile_id: str = ""

    @property
    def shape(self):
        return self.y.shape


def normalize_bands(raw, scale=DEFAULT_SCALE, nodata=None):
    """Scale digital numbers to reflectance and clip to [0, 1].

    Pixels equal to ``nodata`` are mapped to 0 first so they fall out of the
    supervision mask.

    Args:
        raw: C x H x W array of digital numbers.
        scale: Positive divisor (1e4 for Sentinel-2 L2A, 255 for 8-bit imagery).
        nodata: Optional sentinel value.

    Returns:
        float64 array of the same shape with values in [0, 1].
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 2:
        raw = raw[None]
    if nodata is not None:
        raw = np.where(raw == nodata, 0.0, raw)
    bad = ~np.isfinite(raw)
    if bad.any():
        c, r, col = np.argwhere(bad)[0]
        raise ValueError(f"non-finite value in band {c} at pixel (row={r}, col={col})")
    return np.clip(raw / scale, 0.0, 1.0)


def form_depth_target(depth, d_max=DEFAULT_DMAX):
    """Map a depth raster to a [0, 1] target with automatic sign handling.

    The sign is chosen so that the median signed depth over valid pixels is
    positive, which accepts both positive-down and negative-elevation rasters.

    Returns:
        (y, sign_s, valid) where ``valid`` is a boolean H x W array.
    """
    if not d_max > 0:
        raise ValueError(f"d_max must be positive, got {d_max}")
    d = np.asarray(getattr(depth, "values", depth), dtype=np.float64)
    valid = np.isfinite(d) & (d != 0) & (np.abs(d) <= 1.5 * d_max)
    if not valid.any():
        raise ValueError("no valid depth pixels")
    med = np.median(d[valid])
    sign_s = -1 if med < 0 else 1
    y = np.zeros_like(d)
    y[valid] = np.clip(sign_s * d[valid] / d_max, 0.0, 1.0)
    return y, sign_s, valid


def build_mask(y, x_norm):
    """Supervision mask: valid target and at least one nonzero input band."""
    y = np.asarray(y)
    x_norm = np.asarray(x_norm)
    if x_norm.shape[1:] != y.shape:
        raise ValueError(f"shape mismatch: x {x_norm.shape} vs y {y.shape}")
    band_frac = (x_norm > 0).mean(axis=0)
    return ((y > 0) & (band_frac > 0)).astype(np.uint8)


def glint_suppress(x_norm, z_threshold=3.0, window=7):
    """Replace overly bright (specular) pixels by their local non-flagged mean.

    Brightness is the mean over visible bands. A pixel is flagged when its
    brightness exceeds mean + z_threshold * std of the nonzero pixels. Each
    flagged pixel gets, in every band, the mean of non-flagged pixels in the
    window x window neighborhood, or the band's global non-flagged mean when
    the whole neighborhood is flagged.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    x = np.asarray(x_norm, dtype=np.float64)
    vis = x[:3].mean(axis=0)
    nz = vis > 0
    if nz.sum() < 2:
        return x.copy()
    mu, sd = vis[nz].mean(), vis[nz].std()
    flagged = nz & (vis > mu + z_threshold * sd)
    out = x.copy()
    if not flagged.any():
        return out

    keep = (~flagged).astype(np.float64)
    # box sums over the window; zero outside the image
    n_keep = ndimage.uniform_filter(keep, size=window, mode="constant") * window**2
    rows, cols = np.nonzero(flagged)
    for c in range(x.shape[0]):
        s = ndimage.uniform_filter(x[c] * keep, size=window, mode="constant") * window**2
        global_mean = x[c][~flagged].mean()
        nk = np.round(n_keep[rows, cols])
        local = np.divide(s[rows, cols], nk, out=np.full(len(rows), global_mean), where=nk > 0)
        out[c, rows, cols] = local
    logger.debug("glint_suppress replaced %d pixels", len(rows))
    return out


def rescale_transform(t_s, src_size, tgt_size):
    """Rescale pixel sizes so a raster resampled to ``tgt_size`` keeps its extent.

    Args:
        t_s: Source affine transform.
        src_size: (H_s, W_s).
        tgt_size: (H_t, W_t).
    """
    h_s, w_s = src_size
    h_t, w_t = tgt_size
    if min(h_s, w_s, h_t, w_t) <= 0:
        raise ValueError(f"sizes must be positive, got {src_size} -> {tgt_size}")
    return Affine(*t_s[:6]) @ Affine.scale(w_s / w_t, h_s / h_t)


def footprint(t, size):
    """Map coordinates of the four raster corners, in (ul, ur, lr, ll) order."""
    h, w = size
    return [t @ (0, 0), t @ (w, 0), t @ (w, h), t @ (0, h)]


def resample(grid, size, kind="bilinear"):
    """Resample an H x W grid to ``size``.

    ``kind`` is "bilinear" for continuous values (depths) or "nearest" for masks,
    which keeps binary masks binary.
    """
    grid = np.asarray(grid)
    if tuple(grid.shape) == tuple(size):
        return grid.copy()
    factors = (size[0] / grid.shape[0], size[1] / grid.shape[1])
    if kind == "nearest":
        return ndimage.zoom(grid, factors, order=0, mode="nearest", grid_mode=True)
    if kind == "bilinear":
        return ndimage.zoom(grid.astype(np.float64), factors, order=1, mode="nearest", grid_mode=True)
    raise ValueError(f"unknown resampling kind {kind!r}")


def make_pair(tile, depth, d_max=DEFAULT_DMAX, scale=DEFAULT_SCALE, glint_z=None,
              glint_window=7, tile_id=""):
    """Run normalization, optional glint suppression, target and mask formation."""
    x = normalize_bands(tile.bands, scale=scale, nodata=tile.nodata)
    if glint_z is not None:
        x = glint_suppress(x, z_threshold=glint_z, window=glint_window)
    d = depth.values if isinstance(depth, DepthRaster) else np.asarray(depth)
    if d.shape != x.shape[1:]:
        d = resample(d, x.shape[1:], kind="bilinear")
    y, sign_s, _ = form_depth_target(d, d_max)
    mask = build_mask(y, x)
    return SupervisionPair(x_norm=x, y=y, mask=mask, d_max=d_max, sign_s=sign_s, tile_id=tile_id)


# ---------------------------------------------------------------------------
# GeoTIFF exchange
# ---------------------------------------------------------------------------


def write_tile(path, tile: RasterTile, depth: Optional[DepthRaster] = None):
    """Write a tile as a float32 band-interleaved GeoTIFF.

    The depth raster, when given, is appended as a final band described as
    ``"depth"`` so a single file carries an image/label pair.
    """
    bands = [tile.bands.astype(np.float32)]
    names = list(tile.band_names)
    if depth is not None:
        bands.append(np.asarray(depth.values, dtype=np.float32)[None])
        names.append(DEPTH_BAND)
    data = np.concatenate(bands, axis=0)
    _write(path, data, tile.affine, tile.crs_id, names, nodata=tile.nodata,
           tags={"depth_source": depth.source} if depth is not None else None)


def read_tile(path):
    """Read a GeoTIFF written by :func:`write_tile` (or any multiband raster).

    Returns:
        (RasterTile, DepthRaster or None)
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster not found: {path}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotGeoreferencedWarning)
        with rasterio.open(path) as src:
            data = src.read()
            names = [d or f"B{i}" for i, d in enumerate(src.descriptions)]
            affine = src.transform
            nodata = src.nodata
            tags = src.tags()
            if src.crs is None:
                warnings.warn(f"{path.name}: no CRS, using identity georeferencing")
                crs_id = ""
            else:
                crs_id = src.crs.to_string()
    depth = None
    if DEPTH_BAND in names:
        i = names.index(DEPTH_BAND)
        depth = DepthRaster(values=data[i], source=tags.get("depth_source", "synthetic"))
        data = np.delete(data, i, axis=0)
        names.pop(i)
    tile = RasterTile(bands=data, band_names=tuple(names), affine=affine, crs_id=crs_id, nodata=nodata)
    return tile, depth


def write_prediction(path, grid, affine, crs_id=""):
    """Write a single-band float32 prediction grid (meters)."""
    _write(path, np.asarray(grid, dtype=np.float32)[None], affine, crs_id, ["depth_pred"])


def write_mask(path, mask, affine, crs_id=""):
    """Write a binary mask as an 8-bit {0,1} raster."""
    _write(path, (np.asarray(mask) > 0).astype(np.uint8)[None], affine, crs_id, ["mask"])


def read_grid(path):
    """Read band 1 of a raster; returns (grid, affine, crs_id)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotGeoreferencedWarning)
        with rasterio.open(path) as src:
            crs = src.crs.to_string() if src.crs is not None else ""
            return src.read(1), src.transform, crs


def _write(path, data, affine, crs_id, names: Sequence[str], nodata=None, tags=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    profile = dict(
        driver="GTiff",
        height=data.shape[1],
        width=data.shape[2],
        count=data.shape[0],
        dtype=data.dtype.name,
        transform=Affine(*affine[:6]),
        interleave="band",
    )
    if crs_id:
        profile["crs"] = crs_id
    if nodata is not None:
        profile["nodata"] = nodata
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotGeoreferencedWarning)
        with rasterio.open(path, "w", **profile) as dst:
            dst.write(data)
            for i, name in enumerate(names, start=1):
                dst.set_band_description(i, name)
            if tags:
                dst.update_tags(**tags)
