"""
Ablation-CAM saliency for depth regression and the performance-retention test.

Channel weights come from the error increase when a decoder channel is
zeroed; the saliency map is the ReLU of the weighted channel sum. The
retention test keeps only the top-rho% salient pixels, neutralizes the
rest, and measures how much the error grows.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .net import forward, forward_with_channel_ablated
from .trainer import DEFAULT_PAD, infer_padded

DEFAULT_RHOS = (20, 30, 50)
EPS = 1e-8


@dataclass
class SaliencyMap:
    grid: np.ndarray
    source_layer: str = "last_decoder_block"
    tile_id: str = ""
    weights: Optional[np.ndarray] = None
    e_full: float = float("nan")
    e_minus: Optional[np.ndarray] = None


@dataclass
class RetentionReport:
    tile_id: str
    e_full: float
    rows: List[Tuple[float, float, float]] = field(default_factory=list)

    def add(self, rho, e_mask):
        self.rows.append((rho, e_mask, delta_pct(e_mask, self.e_full)))


def delta_pct(e_mask, e_full):
    """Relative error increase in percent."""
    return 100.0 * (e_mask - e_full) / e_full


def rmse_m(pred, y, mask, d_max):
    """RMSE in meters over mask == 1 pixels."""
    m = np.asarray(mask) > 0
    if not m.any():
        raise ValueError("no valid pixels")
    return float(np.sqrt(np.mean((np.asarray(pred)[m] - np.asarray(y)[m]) ** 2)) * d_max)


def _upsample(a, size):
    t = torch.as_tensor(a, dtype=torch.float64)[None, None]
    if tuple(a.shape) == tuple(size):
        return a.astype(np.float64)
    return F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()


def acamr(model, x, y, mask, d_max, eps=EPS, layer_name="last_decoder_block", tile_id=""):
    """Ablation-CAM saliency adapted to regression.

    Runs one full forward pass (which also records the layer's activations)
    and one pass per ablated channel, K + 1 passes in total. The passes go
    through forward hooks on ``model``, so concurrent calls need separate
    model copies.
    """
    store = {}

    def capture(module, inputs, output):
        store["a"] = output[0].detach().cpu().numpy()

    handle = model.named_layers[layer_name].register_forward_hook(capture)
    try:
        pred = forward(model, x)
    finally:
        handle.remove()
    acts = store["a"]
    k_count = acts.shape[0]
    if k_count == 0:
        raise ValueError(f"layer {layer_name!r} has no channels")
    e_full = rmse_m(pred, y, mask, d_max)
    if not math.isfinite(e_full):
        raise ValueError("baseline error is not finite")
    e_minus = np.array([rmse_m(forward_with_channel_ablated(model, x, layer_name, k), y, mask, d_max)
                        for k in range(k_count)])
    w = (e_minus - e_full) / (e_full + eps)
    cam = np.maximum(np.tensordot(w, acts.astype(np.float64), axes=1), 0.0)
    cam = np.maximum(_upsample(cam, np.asarray(y).shape), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return SaliencyMap(grid=cam, source_layer=layer_name, tile_id=tile_id, weights=w,
                       e_full=e_full, e_minus=e_minus)


def top_p_mask(saliency, rho):
    """Boolean H x W mask of the round(rho% * H * W) most salient pixels.

    Ties are broken in row-major order.
    """
    if not 0 < rho <= 100:
        raise ValueError(f"rho must lie in (0, 100], got {rho}")
    grid = np.asarray(getattr(saliency, "grid", saliency), dtype=np.float64)
    n = int(math.floor(rho / 100.0 * grid.size + 0.5))
    order = np.argsort(-grid.ravel(), kind="stable")
    keep = np.zeros(grid.size, dtype=bool)
    keep[order[:n]] = True
    return keep.reshape(grid.shape)


def neutralize(x, omega, mask):
    """Keep ``x`` inside ``omega``; fill every band outside with a neutral value.

    The fill is the band mean over omega & mask when that set is nonempty,
    otherwise the band mean over the whole image.
    """
    x = np.asarray(x, dtype=np.float64)
    omega = np.asarray(omega, dtype=bool)
    sel = omega & (np.asarray(mask) > 0)
    out = x.copy()
    outside = ~omega
    for c in range(x.shape[0]):
        fill = x[c][sel].mean() if sel.any() else x[c].mean()
        out[c][outside] = fill
    return out


def retention_test(model, x, y, mask, saliency, rhos=DEFAULT_RHOS, d_max=1.0, pad=DEFAULT_PAD,
                   tile_id=None):
    """Error inflation when only the top-rho% salient pixels are kept."""
    tile_id = tile_id if tile_id is not None else getattr(saliency, "tile_id", "")
    e_full = rmse_m(infer_padded(model, x, pad), y, mask, d_max)
    report = RetentionReport(tile_id=tile_id, e_full=e_full)
    for rho in rhos:
        xt = neutralize(x, top_p_mask(saliency, rho), mask)
        report.add(rho, rmse_m(infer_padded(model, xt, pad), y, mask, d_max))
    return report


RETENTION_COLUMNS = ("tile", "e_full_m", "rho", "e_mask_m", "delta_pct")


def write_retention_csv(path, reports: Sequence[RetentionReport]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RETENTION_COLUMNS)
        for r in reports:
            for rho, e_mask, delta in r.rows:
                w.writerow([r.tile_id, f"{r.e_full:.6f}", f"{rho:g}", f"{e_mask:.6f}", f"{delta:.4f}"])


def read_retention_csv(path):
    reports = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rep = reports.setdefault(row["tile"], RetentionReport(row["tile"], float(row["e_full_m"])))
            rep.rows.append((float(row["rho"]), float(row["e_mask_m"]), float(row["delta_pct"])))
    return list(reports.values())
