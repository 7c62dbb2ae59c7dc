"""
Band importance, interpretable feature maps, the QC gate and depth-binned
evaluation.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage, stats

from .geodata import BAND_COLORS
from .losses import edt
from .trainer import DEFAULT_PAD, EvalReport, infer_padded, pooled_metrics

FEATURES = ("VIS", "R01", "R12", "Var", "Grad", "LapVar")
EPS = 1e-8
SCHEMA_VERSION = 1


@dataclass
class BandImportanceReport:
    band_names: List[str]
    delta_rmse_m: List[float]
    rank: List[int]
    baseline_rmse_m: float

    def rows(self):
        for name, d, r in zip(self.band_names, self.delta_rmse_m, self.rank):
            yield {"band": name, "color": BAND_COLORS.get(name, ""), "delta_rmse_m": d, "rank": r}


@dataclass
class FeatureCorrReport:
    stats: Dict[str, Dict[str, float]]
    tile_id: str = ""
    rho: float = 30.0


@dataclass
class DepthBinReport:
    edges: np.ndarray
    mae_m: np.ndarray
    rmse_m: np.ndarray  # nan where count < min_count
    count: np.ndarray
    min_count: int = 50

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def rows(self):
        for lo, hi, mae, rmse, n in zip(self.edges[:-1], self.edges[1:], self.mae_m, self.rmse_m, self.count):
            yield {"bin_lo_m": float(lo), "bin_hi_m": float(hi), "count": int(n),
                   "mae_m": None if n == 0 else float(mae),
                   "rmse_m": None if np.isnan(rmse) else float(rmse)}


def rank_descending(values):
    """1-based ranks, largest value first; ties keep index order."""
    order = np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")
    ranks = np.empty(len(order), dtype=int)
    ranks[order] = np.arange(1, len(order) + 1)
    return ranks.tolist()


def replace_band(x, b, fill):
    if not 0 <= b < x.shape[0]:
        raise IndexError(f"band {b} out of range for {x.shape[0]} bands")
    out = np.array(x, dtype=np.float64, copy=True)
    out[b] = fill
    return out


def lobo(model, dataset, d_max=None, fill="tile", pad=DEFAULT_PAD, band_names=None, bands=None):
    """Leave-one-band-out importance on a fixed model.

    Band b of every tile is replaced by its mean over valid pixels (per tile,
    or over the whole dataset with ``fill="global"``); RMSE is pooled over the
    dataset in meters and the increase over the unperturbed RMSE is reported.
    """
    if not dataset:
        raise ValueError("empty dataset")
    d_max = d_max if d_max is not None else dataset[0].d_max
    n_bands = dataset[0].x_norm.shape[0]
    bands = range(n_bands) if bands is None else bands
    ys = [p.y for p in dataset]
    ms = [p.mask for p in dataset]
    base = pooled_metrics([infer_padded(model, p.x_norm, pad) for p in dataset], ys, ms, d_max).rmse_m
    deltas = []
    for b in bands:
        if not 0 <= b < n_bands:
            raise IndexError(f"band {b} out of range for {n_bands} bands")
        if fill == "global":
            vals = np.concatenate([p.x_norm[b][p.mask > 0] for p in dataset])
            fills = [vals.mean()] * len(dataset)
        else:
            fills = [p.x_norm[b][p.mask > 0].mean() if p.mask.any() else p.x_norm[b].mean() for p in dataset]
        preds = [infer_padded(model, replace_band(p.x_norm, b, f), pad) for p, f in zip(dataset, fills)]
        deltas.append(pooled_metrics(preds, ys, ms, d_max).rmse_m - base)
    names = list(band_names or [f"B{b}" for b in bands])
    return BandImportanceReport(band_names=names, delta_rmse_m=deltas, rank=rank_descending(deltas),
                                baseline_rmse_m=base)


def local_variance(a, k):
    mean = ndimage.uniform_filter(a, size=k, mode="reflect")
    sq = ndimage.uniform_filter(a * a, size=k, mode="reflect")
    return np.maximum(sq - mean * mean, 0.0)


def feature_maps(x_norm, k=7, sigma=1.0, ratio_clip=10.0, eps=EPS):
    """Interpretable per-pixel features from the first three bands.

    Returns a dict with VIS brightness, band ratios B0/B1 and B1/B2 (clipped to
    [0, ratio_clip]), k x k local variance of VIS, Sobel gradient magnitude of
    VIS, and k x k local variance of the Laplacian of Gaussian-smoothed VIS.
    """
    x = np.asarray(x_norm, dtype=np.float64)
    if x.shape[0] < 3:
        raise ValueError("feature maps need at least three bands")
    if k % 2 == 0:
        raise ValueError("k must be odd")
    b0, b1, b2 = x[0], x[1], x[2]
    vis = (b0 + b1 + b2) / 3.0
    gx = ndimage.sobel(vis, axis=1, mode="reflect")
    gy = ndimage.sobel(vis, axis=0, mode="reflect")
    lap = ndimage.laplace(ndimage.gaussian_filter(vis, sigma, mode="reflect"), mode="reflect")
    return {
        "VIS": vis,
        "R01": np.clip(b0 / (b1 + eps), 0.0, ratio_clip),
        "R12": np.clip(b1 / (b2 + eps), 0.0, ratio_clip),
        "Var": local_variance(vis, k),
        "Grad": np.hypot(gx, gy),
        "LapVar": local_variance(lap, k),
    }


def corr_s(f, s, eps=EPS):
    """Mean product of eps-guarded z-scores of two equally sized samples."""
    f = np.asarray(f, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    zf = (f - f.mean()) / (f.std() + eps)
    zs = (s - s.mean()) / (s.std() + eps)
    return float(np.mean(zf * zs))


def saliency_correlations(features, saliency, omega, eps=EPS, tile_id="", rho=30.0):
    """Mean, 90th percentile and saliency correlation of each feature over omega."""
    omega = np.asarray(omega, dtype=bool)
    if omega.sum() < 2:
        raise ValueError("omega must contain at least two pixels")
    s = np.asarray(getattr(saliency, "grid", saliency))[omega]
    out = {}
    for name, fmap in features.items():
        v = np.asarray(fmap)[omega]
        out[name] = {"mean": float(v.mean()), "p90": float(np.percentile(v, 90)),
                     "corr_s": corr_s(v, s, eps)}
    return FeatureCorrReport(stats=out, tile_id=tile_id, rho=rho)


def qc_gate(x_norm, features, land_mask, vis_quantile=0.95, var_quantile=0.95, shore_dist_px=20.0, k=7):
    """Exclusion mask for bright, high-variance pixels close to shore.

    Quantile thresholds describe the water surface, so they are taken over
    water pixels whose k x k window holds no land (all water pixels if none
    qualify). Windows straddling the coastline otherwise dominate the upper
    Var quantiles and hide isolated speckles.

    Returns:
        uint8 H x W mask, 1 = exclude.
    """
    if not (0 < vis_quantile < 1 and 0 < var_quantile < 1):
        raise ValueError("quantiles must lie in (0, 1)")
    land = np.asarray(land_mask) > 0
    water = ~land
    if not land.any() or not water.any():
        return np.zeros(land.shape, dtype=np.uint8)
    if features is None:
        features = feature_maps(x_norm, k=k)
    vis, var = features["VIS"], features["Var"]
    ref = ndimage.binary_erosion(water, np.ones((k, k), bool), border_value=1)
    if not ref.any():
        ref = water
    vis_t = np.quantile(vis[ref], vis_quantile)
    var_t = np.quantile(var[ref], var_quantile)
    dist_to_land = edt(water)
    flag = water & (vis > vis_t) & (var > var_t) & (dist_to_land < shore_dist_px)
    return flag.astype(np.uint8)


def depth_binned_eval(pred_m, truth_m, mask, bin_width_m=0.25, min_count=50):
    """Per-depth-bin MAE (and RMSE when a bin holds >= min_count pixels).

    Bins of width ``bin_width_m`` start at 0 (or lower for negative truth)
    and cover every valid truth value.
    """
    if not bin_width_m > 0:
        raise ValueError("bin_width_m must be positive")
    preds = pred_m if isinstance(pred_m, (list, tuple)) else [pred_m]
    truths = truth_m if isinstance(truth_m, (list, tuple)) else [truth_m]
    masks = mask if isinstance(mask, (list, tuple)) else [mask]
    sel = [np.asarray(m) > 0 for m in masks]
    p = np.concatenate([np.asarray(a, dtype=np.float64)[s] for a, s in zip(preds, sel)])
    t = np.concatenate([np.asarray(a, dtype=np.float64)[s] for a, s in zip(truths, sel)])
    if t.size == 0:
        edges = np.array([0.0, bin_width_m])
        return DepthBinReport(edges, np.array([np.nan]), np.array([np.nan]), np.array([0]), min_count)
    lo = min(0.0, math.floor(t.min() / bin_width_m) * bin_width_m)
    idx = np.floor((t - lo) / bin_width_m).astype(int)
    n_bins = int(idx.max()) + 1
    edges = lo + bin_width_m * np.arange(n_bins + 1)
    count = np.bincount(idx, minlength=n_bins)
    abs_sum = np.bincount(idx, weights=np.abs(p - t), minlength=n_bins)
    sq_sum = np.bincount(idx, weights=(p - t) ** 2, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mae = abs_sum / count
        rmse = np.sqrt(sq_sum / count)
    rmse[count < min_count] = np.nan
    return DepthBinReport(edges, mae, rmse, count, min_count)


def depth_trend(report: DepthBinReport, min_count=None):
    """Spearman correlation between bin center and bin MAE over populated bins."""
    min_count = report.min_count if min_count is None else min_count
    keep = report.count >= max(min_count, 1)
    if keep.sum() < 3:
        return float("nan")
    return float(stats.spearmanr(report.centers[keep], report.mae_m[keep]).statistic)


def depth_slope(report: DepthBinReport, min_count=None):
    """Least-squares slope of bin MAE against bin center (m per m)."""
    min_count = report.min_count if min_count is None else min_count
    keep = report.count >= max(min_count, 1)
    return float(np.polyfit(report.centers[keep], report.mae_m[keep], 1)[0])


def cross_region_eval(model, dataset_b, d_max_b=None, bin_width_m=0.25, min_count=50, pad=DEFAULT_PAD):
    """Evaluate a fixed model on an unseen region: pooled metrics plus depth bins."""
    if not dataset_b:
        raise ValueError("cross-region dataset is empty")
    d_max_b = d_max_b if d_max_b is not None else dataset_b[0].d_max
    preds = [infer_padded(model, p.x_norm, pad) for p in dataset_b]
    report = pooled_metrics(preds, [p.y for p in dataset_b], [p.mask for p in dataset_b], d_max_b)
    bins = depth_binned_eval([q * d_max_b for q in preds], [p.y * d_max_b for p in dataset_b],
                             [p.mask for p in dataset_b], bin_width_m, min_count)
    return report, bins


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_rows_csv(path, rows, columns):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def write_json(path, payload):
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(type(o))

    def clean(o):
        if isinstance(o, float) and math.isnan(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o

    with open(path, "w") as f:
        json.dump(clean({"schema_version": SCHEMA_VERSION, **payload}), f, indent=2, sort_keys=True,
                  default=default)
        f.write("\n")


def write_band_importance(stem, report: BandImportanceReport):
    rows = list(report.rows())
    write_rows_csv(f"{stem}.csv", rows, ["band", "color", "delta_rmse_m", "rank"])
    write_json(f"{stem}.json", {"baseline_rmse_m": report.baseline_rmse_m, "bands": rows})


def write_depth_bins(stem, report: DepthBinReport, extra=None):
    rows = list(report.rows())
    write_rows_csv(f"{stem}.csv", rows, ["bin_lo_m", "bin_hi_m", "count", "mae_m", "rmse_m"])
    write_json(f"{stem}.json", {"min_count": report.min_count, "bins": rows, **(extra or {})})


def write_feature_corr(stem, reports: Sequence[FeatureCorrReport]):
    rows = [{"tile": r.tile_id, "rho": r.rho, "feature": name, **vals}
            for r in reports for name, vals in r.stats.items()]
    write_rows_csv(f"{stem}.csv", rows, ["tile", "rho", "feature", "mean", "p90", "corr_s"])
    write_json(f"{stem}.json", {"tiles": rows})


def write_eval(stem, report: EvalReport, extra=None):
    write_rows_csv(f"{stem}.csv", [report.as_dict()], ["rmse_m", "mae_m", "r2", "n_pixels"])
    write_json(f"{stem}.json", {**report.as_dict(), **(extra or {})})
