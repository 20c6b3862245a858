"""Soil-moisture upscaling: spatiotemporal fusion, boosted trees and validation."""

from smup.exceptions import (
    GridMismatchError,
    InvalidInputError,
    MalformedInputError,
    RefusalError,
    SmupError,
)
from smup.fusion import FusionParams, ScenePair, StarfmFuser, estarfm_fuse, ub_estarfm_fuse
from smup.gbdt import Ensemble, GBDTRegressor, TrainConfig, predict, train
from smup.grid import GeoGrid, Raster, TimedRaster, read_raster, write_raster
from smup.shap import shap_summary, shapley_bruteforce, tree_shap
from smup.validation import metrics, taylor_stats

__version__ = "0.1.0"

__all__ = [
    "Ensemble",
    "FusionParams",
    "GBDTRegressor",
    "GeoGrid",
    "GridMismatchError",
    "InvalidInputError",
    "MalformedInputError",
    "Raster",
    "RefusalError",
    "ScenePair",
    "SmupError",
    "StarfmFuser",
    "TimedRaster",
    "TrainConfig",
    "estarfm_fuse",
    "metrics",
    "predict",
    "read_raster",
    "shap_summary",
    "shapley_bruteforce",
    "taylor_stats",
    "train",
    "tree_shap",
    "ub_estarfm_fuse",
    "write_raster",
]
