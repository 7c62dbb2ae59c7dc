"""Interpretable satellite-derived bathymetry on a controllable synthetic optics oracle."""

from .geodata import DepthRaster, RasterTile, SupervisionPair, make_pair, read_tile, write_tile
from .losses import LossSpec, boundary_weights, bw_rmse, edt, masked_mae, masked_rmse, objective
from .net import NetConfig, SwinBathyUNet, build, load_checkpoint, save_checkpoint
from .synthscene import OpticsProfile, RegionProfile, SceneSpec, make_tiles, shifted_profile
from .trainer import EvalReport, TrainSpec, evaluate, infer_padded, train

__version__ = "0.1.0"

__all__ = [
    "DepthRaster", "RasterTile", "SupervisionPair", "make_pair", "read_tile", "write_tile",
    "LossSpec", "boundary_weights", "bw_rmse", "edt", "masked_mae", "masked_rmse", "objective",
    "NetConfig", "SwinBathyUNet", "build", "load_checkpoint", "save_checkpoint",
    "OpticsProfile", "RegionProfile", "SceneSpec", "make_tiles", "shifted_profile",
    "EvalReport", "TrainSpec", "evaluate", "infer_padded", "train",
]
