"""
Command-line pipelines.

    bathyscope <synth|train|eval|lobo|explain|retain|features|bins|xregion> --config FILE [--jobs N] [--seed S]

Each run writes into ``<output_dir>/<run_id>/`` (``BATHYSCOPE_OUT`` overrides
``output_dir``). Logs go to stderr, data to files; every PNG has a CSV/JSON
twin holding the plotted numbers.
"""

import argparse
import copy
import logging
import os
import queue
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import diagnostics as diag
from .explain import DEFAULT_RHOS, acamr, retention_test, top_p_mask, write_retention_csv
from .geodata import (DEFAULT_DMAX, DEFAULT_SCALE, make_pair, read_tile, rescale_transform, write_prediction,
                      write_tile)
from .losses import LossSpec
from .net import NetConfig, load_checkpoint
from .synthscene import make_tiles, profile_from_mapping
from .trainer import TrainSpec, evaluate, infer_padded, train, write_history

logger = logging.getLogger("bathyscope")

COMMANDS = ("synth", "train", "eval", "lobo", "explain", "retain", "features", "bins", "xregion")

DEFAULTS = {
    "run_id": "desk",
    "output_dir": "runs",
    "geodata": {"scale": DEFAULT_SCALE, "dmax": DEFAULT_DMAX, "glint_z": 3.0, "glint_window": 7},
    "scene": {"n_train": 36, "n_val": 4, "n_test": 20, "seed": 1},
    "scene_b": {"n_tiles": 20, "depth_mode": "bimodal", "depth_range": [0.0, 5.0], "seed": 1001,
                "k_att": {"b0": 0.5, "b1": 0.12, "b2": 1.0}},
    "net": {"variant": "cross_only"},
    "train": {"epochs": 30, "lr0": 1e-3, "batch": 1, "crop": 64, "seed": 0, "augment": True,
              "paper_protocol": False},
    "loss": {"kind": "bw_rmse", "decay": "linear", "d_min": 0.0, "d_max_dist": 20.0, "eps": 1e-8},
    "explain": {"rhos": list(DEFAULT_RHOS), "pad": 16, "layer": "last_decoder_block"},
    "diagnostics": {"k": 7, "sigma": 1.0, "ratio_clip": 10.0, "rho": 30, "bin_width_m": 0.25, "min_count": 50,
                    "lobo_fill": "tile", "vis_quantile": 0.95, "var_quantile": 0.95, "shore_dist_px": 20.0},
}
SCENE_EXTRA = {"scene": ("n_train", "n_val", "n_test"), "scene_b": ("n_tiles",)}
NET_KEYS = {f.name for f in fields(NetConfig)} - {"attention_variant"} | {"variant"}


class PipelineError(Exception):
    """A missing artifact or invalid configuration; reported without traceback."""


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}{key}"
        if key not in base and not _open_section(path):
            raise PipelineError(f"unknown config key {where!r}")
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def _open_section(path):
    # scene sections accept every scene/optics key (validated by profile_from_mapping),
    # net every NetConfig field (validated in load_config)
    return path.split(".")[0] in ("scene", "scene_b", "net") and path != ""


def load_config(path=None, overrides=None):
    """Merge a YAML file over the defaults, rejecting unknown keys."""
    user = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise PipelineError(f"config file not found: {path}")
        user = yaml.safe_load(path.read_text()) or {}
    cfg = _merge(DEFAULTS, user)
    cfg = _merge(cfg, overrides or {})
    for key in cfg["net"]:
        if key not in NET_KEYS:
            raise PipelineError(f"unknown config key 'net.{key}'")
    # validate scene sections early so typos fail before any work
    for section in ("scene", "scene_b"):
        try:
            _profile(cfg, section)
        except (KeyError, ValueError, TypeError) as e:
            raise PipelineError(f"invalid {section} section: {e}") from e
    if os.environ.get("BATHYSCOPE_OUT"):
        cfg["output_dir"] = os.environ["BATHYSCOPE_OUT"]
    return cfg


def _profile(cfg, section):
    scene = {k: v for k, v in cfg[section].items() if k not in SCENE_EXTRA[section]}
    if section == "scene_b":
        # region B inherits region A's keys unless overridden
        base = {k: v for k, v in cfg["scene"].items() if k not in SCENE_EXTRA["scene"]}
        scene = _deep_merge(base, scene)
    return profile_from_mapping(scene)


def _deep_merge(a, b):
    out = copy.deepcopy(a)
    for k, v in b.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _run_dir(cfg):
    d = Path(cfg["output_dir"]) / str(cfg["run_id"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _snapshot(cfg, run_dir, command):
    with open(run_dir / f"resolved_config.{command}.yaml", "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=True)


def _net_config(cfg):
    net = dict(cfg["net"])
    net["attention_variant"] = net.pop("variant")
    net.setdefault("seed", cfg["train"]["seed"])
    return NetConfig(**net)


def _train_spec(cfg):
    t = {k: v for k, v in cfg["train"].items() if k != "paper_protocol"}
    return TrainSpec(loss=LossSpec(**cfg["loss"]), **t)


def _pmap(fn, items, jobs):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# dataset access
# ---------------------------------------------------------------------------


def _split_dir(run_dir, split):
    d = run_dir / "dataset" / split
    if not d.is_dir() or not any(d.glob("*.tif")):
        raise PipelineError(f"missing dataset split {split!r} at {d} (run 'bathyscope synth' first)")
    return d


def load_split(cfg, run_dir, split, jobs=1):
    g = cfg["geodata"]
    paths = sorted(_split_dir(run_dir, split).glob("*.tif"))

    def load(path):
        tile, depth = read_tile(path)
        if depth is None:
            raise PipelineError(f"{path} has no depth band")
        return make_pair(tile, depth, d_max=g["dmax"], scale=g["scale"], glint_z=g["glint_z"],
                         glint_window=g["glint_window"], tile_id=path.stem), tile

    loaded = _pmap(load, paths, jobs)
    return [p for p, _ in loaded], [t for _, t in loaded]


def _load_model(run_dir, checkpoint=None):
    path = Path(checkpoint) if checkpoint else run_dir / "checkpoints" / "best.pt"
    if not path.exists():
        raise PipelineError(f"missing checkpoint {path} (run 'bathyscope train' first)")
    model, _ = load_checkpoint(path)
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg, run_dir, jobs=1, **_):
    s = cfg["scene"]
    prof_a = _profile(cfg, "scene")
    n_a = s["n_train"] + s["n_val"] + s["n_test"]
    tiles = make_tiles(prof_a, n_a, prefix="a", d_max=cfg["geodata"]["dmax"])
    splits = {"train": tiles[:s["n_train"]], "val": tiles[s["n_train"]:s["n_train"] + s["n_val"]],
              "test": tiles[s["n_train"] + s["n_val"]:]}
    splits["xregion"] = make_tiles(_profile(cfg, "scene_b"), cfg["scene_b"]["n_tiles"], prefix="b",
                                   d_max=cfg["geodata"]["dmax"])
    for split, items in splits.items():
        out = run_dir / "dataset" / split
        out.mkdir(parents=True, exist_ok=True)
        for old in out.glob("*.tif"):
            old.unlink()
        _pmap(lambda t: write_tile(out / f"{t.tile_id}.tif", t.tile, t.depth), items, jobs)
        logger.info("wrote %d %s tiles to %s", len(items), split, out)


def cmd_train(cfg, run_dir, jobs=1, **_):
    train_set, _ = load_split(cfg, run_dir, "train", jobs)
    val_dir = run_dir / "dataset" / "val"
    val_set = load_split(cfg, run_dir, "val", jobs)[0] if val_dir.is_dir() and any(val_dir.glob("*.tif")) else None
    if cfg["train"]["paper_protocol"]:
        # test patches are also trained on, as in the original protocol
        train_set = train_set + load_split(cfg, run_dir, "test", jobs)[0]
    model, history = train(train_set, _net_config(cfg), _train_spec(cfg), validation=val_set,
                           checkpoint_dir=run_dir / "checkpoints")
    write_history(run_dir / "history.csv", history)
    _plot_history(run_dir / "history.png", history)


def cmd_eval(cfg, run_dir, jobs=1, checkpoint=None, **_):
    model = _load_model(run_dir, checkpoint)
    test, tiles = load_split(cfg, run_dir, "test", jobs)
    report = evaluate(model, test, cfg["geodata"]["dmax"], pad=cfg["explain"]["pad"])
    diag.write_eval(run_dir / "eval", report, {"split": "test", "n_tiles": len(test)})
    pred_dir = run_dir / "predictions"
    for p, t in zip(test, tiles):
        pred = infer_padded(model, p.x_norm, cfg["explain"]["pad"]) * p.d_max
        affine = rescale_transform(t.affine, t.shape, pred.shape)
        write_prediction(pred_dir / f"{p.tile_id}.tif", pred.astype(np.float32), affine, t.crs_id)
    logger.info("test RMSE %.3f m, MAE %.3f m, R2 %.4f", report.rmse_m, report.mae_m, report.r2)


def cmd_lobo(cfg, run_dir, jobs=1, checkpoint=None, **_):
    model = _load_model(run_dir, checkpoint)
    test, _ = load_split(cfg, run_dir, "test", jobs)
    rep = diag.lobo(model, test, cfg["geodata"]["dmax"], fill=cfg["diagnostics"]["lobo_fill"],
                    pad=cfg["explain"]["pad"])
    diag.write_band_importance(run_dir / "lobo", rep)
    _plot_bars(run_dir / "lobo.png", rep.band_names, rep.delta_rmse_m, "ΔRMSE (m)")


def _saliencies(cfg, model, test, jobs):
    e = cfg["explain"]
    # acamr ablates channels through forward hooks, so concurrent tiles each
    # borrow a private copy of the model; copies are made before any hook exists
    pool = queue.SimpleQueue()
    for _ in range(min(jobs, len(test))):
        pool.put(copy.deepcopy(model) if jobs > 1 else model)

    def one(p):
        m = pool.get()
        try:
            return acamr(m, p.x_norm, p.y, p.mask, p.d_max, layer_name=e["layer"], tile_id=p.tile_id)
        finally:
            pool.put(m)

    return _pmap(one, test, jobs)


def cmd_explain(cfg, run_dir, jobs=1, checkpoint=None, **_):
    model = _load_model(run_dir, checkpoint)
    test, tiles = load_split(cfg, run_dir, "test", jobs)
    out = run_dir / "saliency"
    out.mkdir(exist_ok=True)
    rows = []
    for s, t in zip(_saliencies(cfg, model, test, jobs), tiles):
        write_prediction(out / f"{s.tile_id}.tif", s.grid.astype(np.float32), t.affine, t.crs_id)
        np.savetxt(out / f"{s.tile_id}.csv", s.grid, fmt="%.6f", delimiter=",")
        _plot_map(out / f"{s.tile_id}.png", s.grid, f"A-CAM-R {s.tile_id}")
        for k, (w, em) in enumerate(zip(s.weights, s.e_minus)):
            rows.append({"tile": s.tile_id, "channel": k, "e_full_m": s.e_full, "e_minus_m": float(em),
                         "weight": float(w)})
    diag.write_rows_csv(out / "channel_weights.csv", rows, ["tile", "channel", "e_full_m", "e_minus_m", "weight"])


def cmd_retain(cfg, run_dir, jobs=1, checkpoint=None, **_):
    model = _load_model(run_dir, checkpoint)
    test, _ = load_split(cfg, run_dir, "test", jobs)
    e = cfg["explain"]
    sal = _saliencies(cfg, model, test, jobs)
    reports = _pmap(lambda ps: retention_test(model, ps[0].x_norm, ps[0].y, ps[0].mask, ps[1], e["rhos"],
                                              ps[0].d_max, pad=e["pad"], tile_id=ps[0].tile_id),
                    list(zip(test, sal)), jobs)
    write_retention_csv(run_dir / "retention.csv", reports)
    rhos = [float(r) for r in e["rhos"]]
    summary = {"e_full_mean_m": float(np.mean([r.e_full for r in reports])),
               "e_mask_mean_m": {f"{rho:g}": float(np.mean([row[1] for r in reports for row in r.rows
                                                            if row[0] == rho])) for rho in rhos},
               "delta_mean_pct": {f"{rho:g}": float(np.mean([row[2] for r in reports for row in r.rows
                                                             if row[0] == rho])) for rho in rhos}}
    diag.write_json(run_dir / "retention.json", summary)
    _plot_curve(run_dir / "retention.png", rhos, [summary["e_mask_mean_m"][f"{r:g}"] for r in rhos],
                "kept area (%)", "mean E_mask (m)", hline=summary["e_full_mean_m"])


def cmd_features(cfg, run_dir, jobs=1, checkpoint=None, **_):
    model = _load_model(run_dir, checkpoint)
    test, _ = load_split(cfg, run_dir, "test", jobs)
    d = cfg["diagnostics"]
    sal = _saliencies(cfg, model, test, jobs)
    reports, qc_rows = [], []
    for p, s in zip(test, sal):
        feats = diag.feature_maps(p.x_norm, k=d["k"], sigma=d["sigma"], ratio_clip=d["ratio_clip"])
        omega = top_p_mask(s, d["rho"])
        reports.append(diag.saliency_correlations(feats, s, omega, tile_id=p.tile_id, rho=d["rho"]))
        land = p.y == 0
        qc = diag.qc_gate(p.x_norm, feats, land, d["vis_quantile"], d["var_quantile"], d["shore_dist_px"], d["k"])
        qc_rows.append({"tile": p.tile_id, "excluded_px": int(qc.sum())})
    diag.write_feature_corr(run_dir / "features", reports)
    diag.write_rows_csv(run_dir / "qc_gate.csv", qc_rows, ["tile", "excluded_px"])


def _bins(cfg, run_dir, split, model, jobs):
    data, _ = load_split(cfg, run_dir, split, jobs)
    d = cfg["diagnostics"]
    return diag.cross_region_eval(model, data, cfg["geodata"]["dmax"], d["bin_width_m"], d["min_count"],
                                  pad=cfg["explain"]["pad"])


def cmd_bins(cfg, run_dir, jobs=1, checkpoint=None, **_):
    model = _load_model(run_dir, checkpoint)
    _, bins = _bins(cfg, run_dir, "test", model, jobs)
    diag.write_depth_bins(run_dir / "bins", bins, {"spearman": diag.depth_trend(bins)})
    _plot_bins(run_dir / "bins.png", bins)


def cmd_xregion(cfg, run_dir, jobs=1, checkpoint=None, **_):
    model = _load_model(run_dir, checkpoint)
    report, bins = _bins(cfg, run_dir, "xregion", model, jobs)
    diag.write_eval(run_dir / "xregion_eval", report, {"split": "xregion"})
    diag.write_depth_bins(run_dir / "xregion_bins", bins, {"spearman": diag.depth_trend(bins)})
    _plot_bins(run_dir / "xregion_bins.png", bins)


# ---------------------------------------------------------------------------
# figures (views of numbers already written to CSV/JSON)
# ---------------------------------------------------------------------------


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    # no timestamps in PNG metadata so reruns are byte-stable
    fig.savefig(path, dpi=100, metadata={"Software": None})
    _plt().close(fig)


def _plot_history(path, history):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["epoch"] for r in history], [r["loss"] for r in history], marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training objective")
    fig.tight_layout()
    _save(fig, path)


def _plot_bars(path, labels, values, ylabel):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 3.5))
    ax.bar(labels, values)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)


def _plot_map(path, grid, title):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(grid, cmap="inferno", vmin=0, vmax=1)
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title)
    ax.set_axis_off()
    _save(fig, path)


def _plot_curve(path, x, y, xlabel, ylabel, hline=None):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(x, y, marker="o")
    if hline is not None:
        ax.axhline(hline, ls="--", color="gray", label="E_full")
        ax.legend()
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)


def _plot_bins(path, bins):
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax2 = ax.twinx()
    ax2.bar(bins.centers, bins.count, width=0.9 * np.diff(bins.edges), color="lightblue", alpha=0.6)
    ax.plot(bins.centers, bins.mae_m, color="tab:orange", marker="o", zorder=3)
    ax.set_zorder(ax2.get_zorder() + 1)
    ax.patch.set_visible(False)
    ax.set_xlabel("depth (m)")
    ax.set_ylabel("MAE (m)")
    ax2.set_ylabel("pixel count")
    fig.tight_layout()
    _save(fig, path)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="bathyscope", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="YAML configuration file")
    p.add_argument("--jobs", type=int, default=1, help="tile-parallel workers (results keep tile order)")
    p.add_argument("--seed", type=int, help="override every seed (scene, network, training)")
    p.add_argument("--checkpoint", type=Path, help="model checkpoint (default: <run>/checkpoints/best.pt)")
    p.add_argument("--variant", choices=("cross_only", "self_only", "self_cross"))
    p.add_argument("--scale", type=float, help="reflectance divisor for digital numbers")
    p.add_argument("--dmax", type=float, help="depth cap in meters")
    p.add_argument("--glint-z", type=float, help="glint brightness threshold in standard deviations")
    p.add_argument("--glint-window", type=int, help="glint replacement window (odd)")
    p.add_argument("--paper-protocol", action="store_true", help="also train on the test tiles")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args):
    o = {}
    if args.seed is not None:
        o.update(scene={"seed": args.seed}, scene_b={"seed": args.seed + 1000},
                 train={"seed": args.seed}, net={"seed": args.seed})
    if args.variant:
        o.setdefault("net", {})["variant"] = args.variant
    g = {k: v for k, v in (("scale", args.scale), ("dmax", args.dmax), ("glint_z", args.glint_z),
                           ("glint_window", args.glint_window)) if v is not None}
    if g:
        o["geodata"] = g
    if args.paper_protocol:
        o.setdefault("train", {})["paper_protocol"] = True
    return o


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        cfg = load_config(args.config, _overrides(args))
        run_dir = _run_dir(cfg)
        _snapshot(cfg, run_dir, args.command)
        globals()[f"cmd_{args.command}"](cfg, run_dir, jobs=max(1, args.jobs), checkpoint=args.checkpoint)
    except PipelineError as e:
        print(f"bathyscope {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as e:
        print(f"bathyscope {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
