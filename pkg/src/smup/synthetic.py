"""Synthetic upscaling scenario with a known soil-moisture truth.

A 100 x 100 grid at 0.01 degrees carries four dynamic predictors (vpd,
albedo, ndvi, lst) over 60 daily dates and two static ones (dem, clay).
Truth SM is a smooth, tanh-bounded function of ndvi, lst, vpd and clay; site
observations add Gaussian noise. Sites are placed 12 in each validation
cluster box and 4 elsewhere, 28 in total.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from smup.grid import GeoGrid, Raster, dated_name, write_raster
from smup.pipeline import SM_UPPER, PredictorStack, SiteRecord, write_sites_csv
from smup.validation import CLUSTER_BOXES, cluster_of

GRID = GeoGrid(ncols=100, nrows=100, xll=145.7, yll=-35.4, cellsize=0.01)
START = dt.date(2015, 1, 1)
DYNAMIC = ("vpd", "albedo", "ndvi", "lst")
STATIC = ("dem", "clay")


@dataclass
class SyntheticScene:
    stack: PredictorStack
    sites: list
    truth: dict  # date -> float64 (nrows, ncols) SM field
    dates: list


def _smooth_field(rng, grid: GeoGrid, n_waves: int = 4) -> np.ndarray:
    """Zero-mean, unit-scale field built from a few random plane waves."""
    lon, lat = grid.centers()
    X, Y = np.meshgrid((lon - lon.min()) / (lon.max() - lon.min()), (lat - lat.min()) / (lat.max() - lat.min()))
    out = np.zeros(grid.shape)
    for _ in range(n_waves):
        kx, ky = rng.uniform(-3.0, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (kx * X + ky * Y) + phase)
    return out / np.sqrt(n_waves / 2.0)


def truth_sm(vpd, albedo, ndvi, lst, dem, clay):
    """Known SM response; ``albedo`` and ``dem`` do not enter."""
    z = 1.6 * (ndvi - 0.45) / 0.15 - 1.1 * (lst - 300.0) / 6.0 - 0.6 * (vpd - 1.5) / 0.5 + 0.4 * (clay - 0.3) / 0.08
    return 0.25 + 0.15 * np.tanh(0.5 * z)


def generate(seed: int = 42, n_dates: int = 60, noise: float = 0.02, grid: GeoGrid = GRID) -> SyntheticScene:
    rng = np.random.Generator(np.random.Philox(seed))
    dates = [START + dt.timedelta(days=i) for i in range(n_dates)]
    phase = np.linspace(0.0, 2 * np.pi, n_dates, endpoint=False)

    static = {
        "dem": Raster(grid, 150.0 + 40.0 * _smooth_field(rng, grid)),
        "clay": Raster(grid, 0.3 + 0.06 * _smooth_field(rng, grid)),
    }
    # mean level, seasonal amplitude, persistent spatial amplitude, daily anomaly amplitude
    levels = {
        "vpd": (1.5, 0.5, 0.15, 0.25),
        "albedo": (0.18, 0.02, 0.01, 0.01),
        "ndvi": (0.45, 0.12, 0.05, 0.06),
        "lst": (300.0, 6.0, 1.5, 2.5),
    }
    persistent = {v: _smooth_field(rng, grid) for v in DYNAMIC}
    season_shift = {v: rng.uniform(0, 2 * np.pi) for v in DYNAMIC}
    dynamic = {v: {} for v in DYNAMIC}
    truth = {}
    for t, d in enumerate(dates):
        fields = {}
        for v in DYNAMIC:
            mean, seas, sp, anom = levels[v]
            f = mean + seas * np.sin(phase[t] + season_shift[v]) + sp * persistent[v] + anom * _smooth_field(rng, grid, 3)
            fields[v] = f.astype(np.float32).astype(np.float64)
            dynamic[v][d] = Raster(grid, fields[v])
        truth[d] = truth_sm(
            fields["vpd"], fields["albedo"], fields["ndvi"], fields["lst"],
            static["dem"].values.astype(np.float64), static["clay"].values.astype(np.float64),
        )

    stack = PredictorStack(dynamic, static)
    locs = _site_locations(rng, grid)
    sites = []
    for sid, (lon, lat) in locs:
        row, col, _ = grid.cell_index(np.array([lon]), np.array([lat]))
        for d in dates:
            sm = truth[d][row[0], col[0]] + noise * rng.standard_normal()
            sites.append(SiteRecord(sid, lon, lat, d, float(np.clip(sm, 0.0, SM_UPPER))))
    return SyntheticScene(stack=stack, sites=sites, truth=truth, dates=dates)


def _site_locations(rng, grid: GeoGrid, per_cluster: int = 12, others: int = 4):
    margin = 0.005
    locs = []
    for name, (west, east, south, north) in CLUSTER_BOXES.items():
        for i in range(per_cluster):
            lon = rng.uniform(west + margin, east - margin)
            lat = rng.uniform(south + margin, north - margin)
            locs.append((f"{name}{i + 1:02d}", (round(lon, 5), round(lat, 5))))
    placed = 0
    while placed < others:
        lon = rng.uniform(grid.xll + margin, grid.right - margin)
        lat = rng.uniform(grid.yll + margin, grid.top - margin)
        if cluster_of(lon, lat) is None:
            placed += 1
            locs.append((f"X{placed:02d}", (round(lon, 5), round(lat, 5))))
    return locs


def write_scene(scene: SyntheticScene, directory) -> dict:
    """Write predictors and sites under ``directory``; return the config fragment."""
    root = Path(directory)
    for var, series in scene.stack.dynamic.items():
        for d, r in series.items():
            write_raster(r, root / "dynamic" / var / dated_name(var, d))
    for var, r in scene.stack.static.items():
        write_raster(r, root / "static" / var)
    write_sites_csv(scene.sites, root / "sites.csv")
    return {
        "sites": "sites.csv",
        "dynamic": {v: f"dynamic/{v}" for v in scene.stack.dynamic},
        "static": {v: f"static/{v}" for v in scene.stack.static},
    }


def write_experiment(directory, seed: int = 42, threads: int = 1, train: dict | None = None, **extra) -> Path:
    """Write the synthetic scene plus a ``config.json`` for ``smup run``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    config = write_scene(generate(seed), root)
    config.update(
        {
            "output_dir": "out",
            "seed": seed,
            "threads": threads,
            "train": train if train is not None else dict(DEFAULT_TRAIN),
            "validation": {"modes": ["four-fold", "cross-cluster"], "k": 4, "permutation_control": True},
        }
    )
    config.update(extra)
    path = root / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n")
    return path


# Smaller than the library defaults so the ten trainings of a full run stay quick.
DEFAULT_TRAIN = {"n_rounds": 100, "learning_rate": 0.1, "max_depth": 4, "subsample": 0.8, "colsample": 1.0}
