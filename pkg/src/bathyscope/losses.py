"""
Masked and boundary-weighted objectives on normalized depth.

Loss functions take torch tensors (any float dtype) so they double as
training objectives; the weight machinery is numpy.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

EPS = 1e-8
LOSS_KINDS = ("masked_rmse", "masked_mae", "bw_rmse")
# config spellings matching the loss-ablation table rows
LOSS_ALIASES = {"rmse": "masked_rmse", "mae": "masked_mae", "bw_rmse": "bw_rmse",
                "masked_rmse": "masked_rmse", "masked_mae": "masked_mae"}


class NoSupervisionWarning(UserWarning):
    """Raised (as a warning) when a loss sees an all-zero mask."""


@dataclass
class LossSpec:
    kind: str = "bw_rmse"
    decay: str = "linear"
    d_min: float = 0.0
    d_max_dist: float = 20.0
    eps: float = EPS

    def __post_init__(self):
        if self.kind not in LOSS_ALIASES:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        self.kind = LOSS_ALIASES[self.kind]
        if self.decay not in ("linear", "exp"):
            raise ValueError(f"decay must be 'linear' or 'exp', got {self.decay!r}")
        if not self.d_min < self.d_max_dist:
            raise ValueError("d_min must be smaller than d_max_dist")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def _check(pred, target, mask):
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)}, {tuple(target.shape)}, {tuple(mask.shape)}")
    if not bool(mask.any()):
        warnings.warn("all-zero mask: no supervision", NoSupervisionWarning, stacklevel=3)


def masked_rmse(pred, target, mask, eps=EPS):
    _check(pred, target, mask)
    m = mask.to(pred.dtype)
    return torch.sqrt((m * (pred - target) ** 2).sum() / (m.sum() + eps))


def masked_mae(pred, target, mask, eps=EPS):
    _check(pred, target, mask)
    m = mask.to(pred.dtype)
    return (m * (pred - target).abs()).sum() / (m.sum() + eps)


def bw_rmse(pred, target, mask, w, eps=EPS):
    """Boundary-weighted RMSE; reduces to :func:`masked_rmse` for w == 1."""
    _check(pred, target, mask)
    wm = torch.as_tensor(w, dtype=pred.dtype, device=pred.device) * mask.to(pred.dtype)
    return torch.sqrt((wm * (pred - target) ** 2).sum() / (wm.sum() + eps))


def edt(mask):
    """Exact Euclidean distance from each pixel to the nearest mask == 0 pixel.

    Zero on invalid pixels. A mask without any invalid pixel has no boundary;
    every distance is then +inf (callers clip it).
    """
    mask = np.asarray(mask) > 0
    if mask.all():
        return np.full(mask.shape, np.inf)
    if not mask.any():
        return np.zeros(mask.shape)
    return ndimage.distance_transform_edt(mask)


def boundary_weights(mask, spec: LossSpec = None):
    """Per-pixel weights in [1, 2], largest at the validity boundary."""
    spec = spec or LossSpec()
    d = np.clip(edt(mask), spec.d_min, spec.d_max_dist)
    t = (d - spec.d_min) / (spec.d_max_dist - spec.d_min)
    w_tilde = 1.0 - t if spec.decay == "linear" else np.exp(-t)
    lo, hi = w_tilde.min(), w_tilde.max()
    if hi == lo:
        return np.ones_like(w_tilde)
    return 1.0 + (w_tilde - lo) / (hi - lo)


def to_meters(value, d_max):
    if not d_max > 0:
        raise ValueError("d_max must be positive")
    return value * d_max


def objective(spec: LossSpec, pred, target, mask, w=None):
    """Dispatch to the loss named by ``spec.kind``."""
    if spec.kind == "masked_rmse":
        return masked_rmse(pred, target, mask, spec.eps)
    if spec.kind == "masked_mae":
        return masked_mae(pred, target, mask, spec.eps)
    if w is None:
        w = boundary_weights(mask.detach().cpu().numpy(), spec)
    return bw_rmse(pred, target, mask, w, spec.eps)
