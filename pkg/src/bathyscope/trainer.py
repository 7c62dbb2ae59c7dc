"""
Training loop, augmentation, padded inference and metrics in meters.
"""

import csv
import logging
import math
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geodata import SupervisionPair
from .losses import LossSpec, boundary_weights, objective
from .net import NetConfig, build, save_checkpoint

logger = logging.getLogger(__name__)

DEFAULT_PAD = 16


@dataclass
class TrainSpec:
    """Optimization settings. The full-scale values are epochs=30,
    lr0=2.5e-4, batch=1, crop=720; defaults here are desk-scale."""

    epochs: int = 30
    lr0: float = 1e-3
    batch: int = 1
    crop: int = 64
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    augment: bool = True
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0


@dataclass
class EvalReport:
    rmse_m: float
    mae_m: float
    r2: float
    n_pixels: int

    def as_dict(self):
        return {"rmse_m": self.rmse_m, "mae_m": self.mae_m, "r2": self.r2, "n_pixels": self.n_pixels}


class TrainingDiverged(RuntimeError):
    pass


def augment(x, y, mask, seed):
    """Random quarter-turn rotation plus independent horizontal/vertical flips.

    The same transform is applied to the C x H x W input and both H x W grids.
    Returns copies.
    """
    rng = np.random.default_rng(seed)
    k = int(rng.integers(4))
    hflip, vflip = bool(rng.integers(2)), bool(rng.integers(2))
    return tuple(apply_dihedral(g, k, hflip, vflip) for g in (x, y, mask))


def apply_dihedral(grid, k=0, hflip=False, vflip=False):
    """Rotate the last two axes by k quarter turns, then optionally flip."""
    g = np.rot90(grid, k, axes=(-2, -1))
    if hflip:
        g = g[..., ::-1]
    if vflip:
        g = g[..., ::-1, :]
    return np.ascontiguousarray(g)


def _crop(rng, pair_arrays, crop):
    x, y, m = pair_arrays
    h, w = y.shape
    if crop >= h and crop >= w:
        return x, y, m
    r = int(rng.integers(h - crop + 1)) if h > crop else 0
    c = int(rng.integers(w - crop + 1)) if w > crop else 0
    return x[:, r:r + crop, c:c + crop], y[r:r + crop, c:c + crop], m[r:r + crop, c:c + crop]


def cosine_lr(lr0, step, total):
    return 0.5 * lr0 * (1 + math.cos(math.pi * step / max(total, 1)))


def _dataset_loss(model, dataset, spec: LossSpec, weights):
    model.eval()
    with torch.no_grad():
        vals = []
        for pair, w in zip(dataset, weights):
            pred = model(torch.as_tensor(pair.x_norm, dtype=torch.float32)[None])[0, 0]
            vals.append(float(objective(spec, pred, torch.as_tensor(pair.y, dtype=torch.float32),
                                        torch.as_tensor(pair.mask), w)))
    return float(np.mean(vals))


def input_stats(dataset: Sequence[SupervisionPair]):
    """Per-band mean and one pooled scale over the valid pixels of a dataset.

    Each band is centered on its own mean, but all bands share one scale
    (the root mean per-band variance) so relative band contrasts stay those
    of the reflectance data. Rescaling each band to unit variance would
    blow a nearly constant band up into a large, spurious input.

    Returns:
        (mean, std) tuples with one float per band; std is floored at 1e-6.
    """
    pix = np.concatenate([p.x_norm[:, p.mask > 0] for p in dataset], axis=1).astype(np.float64)
    scale = max(float(np.sqrt(pix.var(axis=1).mean())), 1e-6)
    return tuple(pix.mean(axis=1).tolist()), (scale,) * len(pix)


def train(dataset: Sequence[SupervisionPair], net_config: NetConfig = None, train_spec: TrainSpec = None,
          model=None, validation=None, checkpoint_dir=None, callback=None):
    """Fit a model with Adam and a cosine-annealed step size.

    ``history`` holds one row per epoch (epoch 0 = before any update) with the
    mean objective over the (unaugmented) training set in eval mode and the
    learning rate in effect during that epoch. With a ``validation`` set each
    row also carries ``val_rmse_m``. With ``checkpoint_dir`` the model is
    saved every epoch as ``last.pt`` and the best-by-validation model (or the
    latest, without validation) as ``best.pt``. A model built here whose config
    carries no input statistics gets them from :func:`input_stats`, and no
    ``target_mean`` gets the mean valid target (clipped to [0.01, 0.99]).

    Returns:
        (model, history) where history is a list of dicts (epoch, loss, lr).
    """
    dataset = [p for p in dataset if p.mask.any()]
    if not dataset:
        raise ValueError("training dataset is empty")
    net_config = net_config or NetConfig()
    spec = train_spec or TrainSpec()
    torch.manual_seed(spec.seed)
    rng = np.random.default_rng(spec.seed)
    if model is None:
        if net_config.input_mean is None or net_config.input_std is None:
            mean, std = input_stats(dataset)
            net_config = replace(net_config, input_mean=mean, input_std=std)
        if net_config.target_mean is None:
            t = float(np.mean(np.concatenate([p.y[p.mask > 0] for p in dataset])))
            net_config = replace(net_config, target_mean=min(max(t, 0.01), 0.99))
        model = build(net_config)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr0, betas=tuple(spec.betas),
                           weight_decay=spec.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / spec.batch)
    total = steps_per_epoch * spec.epochs
    full_weights = [boundary_weights(p.mask, spec.loss) if spec.loss.kind == "bw_rmse" else None
                    for p in dataset]

    history = [{"epoch": 0, "loss": _dataset_loss(model, dataset, spec.loss, full_weights), "lr": spec.lr0}]
    if validation:
        history[0]["val_rmse_m"] = evaluate(model, validation).rmse_m
    best = math.inf
    step = 0
    for epoch in range(1, spec.epochs + 1):
        order = rng.permutation(len(dataset))
        lr_epoch = cosine_lr(spec.lr0, step, total)
        model.train()
        for s in range(steps_per_epoch):
            idx = order[s * spec.batch:(s + 1) * spec.batch]
            xs, ys, ms, ws = [], [], [], []
            for i in idx:
                p = dataset[i]
                arrays = _crop(rng, (p.x_norm, p.y, p.mask), spec.crop)
                if spec.augment:
                    arrays = augment(*arrays, seed=int(rng.integers(2**31)))
                x, y, m = arrays
                xs.append(x), ys.append(y), ms.append(m)
                ws.append(boundary_weights(m, spec.loss) if spec.loss.kind == "bw_rmse" else None)
            lr = cosine_lr(spec.lr0, step, total)
            for g in opt.param_groups:
                g["lr"] = lr
            pred = model(torch.as_tensor(np.stack(xs), dtype=torch.float32))[:, 0]
            y_t = torch.as_tensor(np.stack(ys), dtype=torch.float32)
            m_t = torch.as_tensor(np.stack(ms))
            # per-tile objective, averaged over the batch
            loss = torch.stack([objective(spec.loss, pred[j], y_t[j], m_t[j], ws[j])
                                for j in range(len(idx)) if ms[j].any()]).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step} (lr={lr:.3g})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        epoch_loss = _dataset_loss(model, dataset, spec.loss, full_weights)
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(f"non-finite training-set loss after epoch {epoch}")
        row = {"epoch": epoch, "loss": epoch_loss, "lr": lr_epoch}
        if validation:
            row["val_rmse_m"] = evaluate(model, validation).rmse_m
        history.append(row)
        logger.info("epoch %d loss %.5f lr %.3g", epoch, epoch_loss, lr_epoch)
        if checkpoint_dir is not None:
            _checkpoint(model, checkpoint_dir, row, best)
            best = min(best, row.get("val_rmse_m", -math.inf))
        if callback is not None:
            callback(model, history)
    return model.eval(), history


def _checkpoint(model, directory, row, best):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(directory / "last.pt", model, extra={"epoch": row["epoch"]})
    if row.get("val_rmse_m", -math.inf) <= best:
        shutil.copyfile(directory / "last.pt", directory / "best.pt")


def write_history(path, history):
    with_val = any("val_rmse_m" in r for r in history)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "lr"] + (["val_rmse_m"] if with_val else []))
        for row in history:
            out = [row["epoch"], f"{row['loss']:.8f}", f"{row['lr']:.8e}"]
            if with_val:
                out.append(f"{row['val_rmse_m']:.6f}")
            w.writerow(out)


@torch.no_grad()
def infer_padded(model, x, pad=DEFAULT_PAD):
    """Reflect-pad by ``pad`` on all sides, predict, crop back to H x W.

    ``model`` is any module mapping (1, C, H, W) to (1, 1, H, W).
    """
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad >= min(h, w):
        raise ValueError(f"pad {pad} must be smaller than the tile size {min(h, w)}")
    p = next(model.parameters(), None)
    dtype = p.dtype if p is not None else torch.float32
    t = torch.as_tensor(x, dtype=dtype)[None]
    if pad:
        t = F.pad(t, (pad, pad, pad, pad), mode="reflect")
    was_training = model.training
    model.eval()
    try:
        out = model(t)[0, 0]
    finally:
        model.train(was_training)
    return out[pad:pad + h, pad:pad + w].cpu().numpy()


def pooled_metrics(preds, truths, masks, d_max):
    """RMSE, MAE (meters) and R^2 pooled over all valid pixels of all tiles."""
    sel = [np.asarray(m) > 0 for m in masks]
    p = np.concatenate([np.asarray(a)[s] for a, s in zip(preds, sel)]).astype(np.float64)
    t = np.concatenate([np.asarray(a)[s] for a, s in zip(truths, sel)]).astype(np.float64)
    if p.size == 0:
        raise ValueError("no valid pixels to evaluate")
    err = p - t
    rmse = math.sqrt(np.mean(err**2)) * d_max
    mae = np.mean(np.abs(err)) * d_max
    ss_tot = np.sum((t - t.mean()) ** 2)
    r2 = 1.0 - np.sum(err**2) / ss_tot if ss_tot > 0 else float("nan")
    return EvalReport(rmse_m=float(rmse), mae_m=float(mae), r2=float(r2), n_pixels=int(p.size))


def predict_dataset(model, dataset, pad=DEFAULT_PAD):
    return [infer_padded(model, p.x_norm, pad) for p in dataset]


def evaluate(model, dataset: Sequence[SupervisionPair], d_max=None, pad=DEFAULT_PAD):
    """Pooled RMSE/MAE in meters and R^2 on the dataset's valid pixels."""
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    d_max = d_max if d_max is not None else dataset[0].d_max
    preds = predict_dataset(model, dataset, pad)
    return pooled_metrics(preds, [p.y for p in dataset], [p.mask for p in dataset], d_max)
