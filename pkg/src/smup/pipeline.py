"""Experiment orchestration: predictor stacks, training tables and SM maps.

Feature order is fixed everywhere as the sorted dynamic variable names
followed by the sorted static variable names. Site records are matched to
dynamic rasters by exact date; records with any missing or nodata predictor
are dropped, never imputed.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from smup.exceptions import GridMismatchError, InvalidInputError, MalformedInputError, RefusalError, SmupError
from smup.grid import (
    GeoGrid,
    Raster,
    TimedRaster,
    check_same_grid,
    dated_name,
    parse_date,
    read_raster,
    read_series,
    read_timed,
    resample_nearest,
    write_raster,
)

log = logging.getLogger(__name__)

SITE_HEADER = ["site_id", "lon", "lat", "date", "sm"]
SM_UPPER = float(np.nextafter(np.float32(1.0), np.float32(0.0)))


@dataclass(frozen=True)
class SiteRecord:
    site_id: str
    lon: float
    lat: float
    date: dt.date
    sm: float

    def __post_init__(self):
        if not self.site_id:
            raise InvalidInputError("site_id must be non-empty")
        if not (-180.0 <= self.lon <= 180.0 and -90.0 <= self.lat <= 90.0):
            raise InvalidInputError(f"site {self.site_id}: invalid location ({self.lon}, {self.lat})")
        if isinstance(self.date, str):
            object.__setattr__(self, "date", parse_date(self.date))
        if not (np.isfinite(self.sm) and 0.0 <= self.sm < 1.0):
            raise InvalidInputError(f"site {self.site_id} {self.date}: sm {self.sm} outside [0, 1)")


def check_unique(sites) -> None:
    seen = set()
    for s in sites:
        key = (s.site_id, s.date)
        if key in seen:
            raise InvalidInputError(f"duplicate site record {s.site_id} {s.date}")
        seen.add(key)


def read_sites_csv(path) -> list[SiteRecord]:
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != SITE_HEADER:
        raise MalformedInputError(f"{path}: header must be {','.join(SITE_HEADER)}, got {header}")
    sites = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 5:
            raise MalformedInputError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
        try:
            sites.append(
                SiteRecord(row[0], float(row[1]), float(row[2]), dt.date.fromisoformat(row[3]), float(row[4]))
            )
        except ValueError as exc:
            raise MalformedInputError(f"{path}:{lineno}: {exc}") from exc
    check_unique(sites)
    return sites


def write_sites_csv(sites, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SITE_HEADER)
    for s in sites:
        w.writerow([s.site_id, repr(float(s.lon)), repr(float(s.lat)), s.date.isoformat(), repr(float(s.sm))])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# -- predictor stack ----------------------------------------------------------


class PredictorStack:
    """Dynamic (per-date) and static rasters on one grid."""

    def __init__(self, dynamic=None, static=None):
        self.dynamic: dict[str, dict[dt.date, Raster]] = {}
        for var, series in (dynamic or {}).items():
            if isinstance(series, dict):
                items = series.items()
            else:
                items = [(tr.date, tr.raster) for tr in series]
            per_date = {}
            for date, raster in items:
                date = parse_date(date) if isinstance(date, str) else date
                if date in per_date:
                    raise InvalidInputError(f"{var}: more than one raster for {date}")
                per_date[date] = raster
            self.dynamic[var] = dict(sorted(per_date.items()))
        self.static: dict[str, Raster] = dict(static or {})
        overlap = set(self.dynamic) & set(self.static)
        if overlap:
            raise InvalidInputError(f"variables both dynamic and static: {sorted(overlap)}")
        rasters = [r for s in self.dynamic.values() for r in s.values()] + list(self.static.values())
        if not rasters:
            raise InvalidInputError("predictor stack is empty")
        self.grid: GeoGrid = check_same_grid(*rasters)

    @property
    def feature_names(self) -> tuple:
        return tuple(sorted(self.dynamic)) + tuple(sorted(self.static))

    def rasters_at(self, date: dt.date) -> list[Raster]:
        """Rasters in feature order for ``date``; raises naming any missing variable."""
        missing = [v for v in sorted(self.dynamic) if date not in self.dynamic[v]]
        if missing:
            raise InvalidInputError(f"no raster for {', '.join(missing)} on {date}")
        return [self.dynamic[v][date] for v in sorted(self.dynamic)] + [self.static[v] for v in sorted(self.static)]

    def dates(self) -> list[dt.date]:
        """Dates at which every dynamic variable is present."""
        if not self.dynamic:
            return []
        common = set.intersection(*(set(s) for s in self.dynamic.values()))
        return sorted(common)

    def resampled(self, grid: GeoGrid) -> "PredictorStack":
        if grid == self.grid:
            return self
        return PredictorStack(
            {v: {d: resample_nearest(r, grid) for d, r in s.items()} for v, s in self.dynamic.items()},
            {v: resample_nearest(r, grid) for v, r in self.static.items()},
        )


def load_stack(dynamic_dirs: dict, static_paths: dict, grid: GeoGrid | None = None) -> PredictorStack:
    """Read ``<var>_<date>`` series and static rasters, resampling onto ``grid``."""
    dynamic = {}
    for var, directory in dynamic_dirs.items():
        series = read_series(directory, var)
        if not series:
            raise InvalidInputError(f"no {var}_<date> rasters found in {directory}")
        dynamic[var] = series
    static = {var: read_raster(p) for var, p in static_paths.items()}
    if grid is not None:
        dynamic = {v: {d: resample_nearest(r, grid) for d, r in s.items()} for v, s in dynamic.items()}
        static = {v: resample_nearest(r, grid) for v, r in static.items()}
    return PredictorStack(dynamic, static)


# -- training table -----------------------------------------------------------


@dataclass
class TrainingMatrix:
    table: object
    labels: np.ndarray
    site_ids: list
    dates: list
    drops: dict = field(default_factory=dict)

    @property
    def n_rows(self) -> int:
        return int(self.labels.size)


DROP_CAUSES = ("missing_dynamic", "outside_extent", "nodata_predictor")


def build_training_table(stack: PredictorStack, sites, policy: str = "exact") -> TrainingMatrix:
    """One feature row per usable site record, with per-cause drop counts."""
    from smup.gbdt import FeatureTable

    if policy != "exact":
        raise InvalidInputError(f"unsupported date-matching policy {policy!r}")
    sites = list(sites)
    check_unique(sites)
    names = stack.feature_names
    drops = dict.fromkeys(DROP_CAUSES, 0)
    if not sites:
        raise RefusalError("no site records given")
    grid = stack.grid
    lon = np.array([s.lon for s in sites])
    lat = np.array([s.lat for s in sites])
    rows_idx, cols_idx, inside = grid.cell_index(lon, lat)
    dyn = sorted(stack.dynamic)
    stat = sorted(stack.static)
    feats = np.full((len(sites), len(names)), np.nan)
    keep = np.ones(len(sites), dtype=bool)
    for i, s in enumerate(sites):
        if any(s.date not in stack.dynamic[v] for v in dyn):
            drops["missing_dynamic"] += 1
            keep[i] = False
            continue
        if not inside[i]:
            drops["outside_extent"] += 1
            keep[i] = False
            continue
        r, c = rows_idx[i], cols_idx[i]
        for j, v in enumerate(dyn):
            ras = stack.dynamic[v][s.date]
            val = ras.values[r, c]
            feats[i, j] = np.nan if val == np.float32(ras.nodata) else float(val)
        if np.isnan(feats[i, : len(dyn)]).any():
            drops["nodata_predictor"] += 1
            keep[i] = False
    for j, v in enumerate(stat, start=len(dyn)):
        ras = stack.static[v]
        vals = ras.values[rows_idx, cols_idx].astype(np.float64)
        vals[ras.values[rows_idx, cols_idx] == np.float32(ras.nodata)] = np.nan
        feats[:, j] = vals
    bad_static = keep & np.isnan(feats[:, len(dyn):]).any(axis=1)
    drops["nodata_predictor"] += int(bad_static.sum())
    keep &= ~bad_static
    if not keep.any():
        raise RefusalError(f"no training rows survive; drops: {drops}")
    kept = [s for s, k in zip(sites, keep) if k]
    return TrainingMatrix(
        table=FeatureTable(feats[keep], names),
        labels=np.array([s.sm for s in kept]),
        site_ids=[s.site_id for s in kept],
        dates=[s.date for s in kept],
        drops=drops,
    )


# -- prediction ---------------------------------------------------------------


def _check_model_order(model, stack):
    if tuple(model.feature_names) != stack.feature_names:
        raise InvalidInputError(
            f"model features {list(model.feature_names)} do not match stack order {list(stack.feature_names)}"
        )


def upscale_predict(model, stack: PredictorStack, date, threads: int = 1) -> TimedRaster:
    """Per-cell model prediction at ``date``, nodata where any predictor is missing."""
    from smup.gbdt import predict

    date = parse_date(date) if isinstance(date, str) else date
    _check_model_order(model, stack)
    rasters = stack.rasters_at(date)
    X = np.stack([r.as_masked().ravel() for r in rasters], axis=1)
    valid = ~np.isnan(X).any(axis=1)
    out = np.full(X.shape[0], np.nan)
    idx = np.flatnonzero(valid)
    threads = max(int(threads or 1), 1)
    chunks = np.array_split(idx, threads) if threads > 1 else [idx]
    chunks = [c for c in chunks if c.size]

    def run(c):
        return predict(model, X[c])

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    for c, p in zip(chunks, parts):
        out[c] = p
    vals = out[valid]
    clamped = int(np.sum((vals < 0.0) | (vals > SM_UPPER)))
    if clamped:
        log.info("clamped %d of %d cells to [0, 1) on %s", clamped, vals.size, date)
    out[valid] = np.clip(vals, 0.0, SM_UPPER)
    grid = stack.grid
    raster = Raster(grid, out.reshape(grid.shape), rasters[0].nodata)
    return TimedRaster(raster, date)


# -- experiment ---------------------------------------------------------------


class ExperimentError(SmupError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` holds the error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")
    return path


def _grid_from_config(grid_cfg) -> GeoGrid | None:
    if grid_cfg is None:
        return None
    from smup.grid import DEFAULT_CELLSIZE

    grid_cfg = dict(grid_cfg)
    cellsize = grid_cfg.pop("cellsize", DEFAULT_CELLSIZE)
    if "extent" in grid_cfg:
        west, south, east, north = grid_cfg["extent"]
        return GeoGrid.from_extent(west, south, east, north, cellsize)
    return GeoGrid(ncols=grid_cfg["ncols"], nrows=grid_cfg["nrows"], xll=grid_cfg["xll"], yll=grid_cfg["yll"], cellsize=cellsize)


@dataclass
class ExperimentResult:
    output_dir: Path
    outputs: dict
    manifest: dict
    reports: dict
    model: object = None


def load_config(path) -> tuple[dict, Path]:
    path = Path(path)
    try:
        return json.loads(path.read_text()), path.parent
    except json.JSONDecodeError as exc:
        raise MalformedInputError(f"{path}: {exc}") from exc


def canonical_config_sha256(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def run_experiment(config, base_dir=None, threads: int | None = None) -> ExperimentResult:
    """resample -> (fuse) -> train -> predict -> validate, writing all artefacts.

    ``config`` is a dict or a path to the JSON document (relative paths are
    resolved against its directory). See the README for the schema.
    """
    from smup import plots
    from smup.fusion import FusionParams, ScenePair, StarfmFuser
    from smup.gbdt import TrainConfig, save_model, train
    from smup.shap import shap_summary, summary_to_dict, tree_shap_many
    from smup.validation import FOUR_FOLD, cross_validate_matrix, make_split

    if not isinstance(config, dict):
        config, base_dir = load_config(config)
    base = Path(base_dir or ".")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    seed = int(config.get("seed", 42))
    threads = int(threads if threads is not None else config.get("threads", 1))
    out = resolve(config.get("output_dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    inputs: list[Path] = []
    outputs: dict[str, Path] = {}
    reports: dict = {}
    stages: list[str] = []

    def stage(name):
        stages.append(name)
        return name

    current = "config"
    try:
        current = stage("resample")
        grid = _grid_from_config(config.get("grid"))
        sites_path = resolve(config["sites"])
        inputs.append(sites_path)
        sites = read_sites_csv(sites_path)
        dynamic_dirs = {v: resolve(p) for v, p in config.get("dynamic", {}).items()}
        static_paths = {v: resolve(p) for v, p in config.get("static", {}).items()}
        for v, d in dynamic_dirs.items():
            inputs.extend(sorted(Path(d).glob(f"{v}_*.json")))
            inputs.extend(sorted(Path(d).glob(f"{v}_*.bin")))
        for p in static_paths.values():
            inputs.extend([Path(f"{p}.json"), Path(f"{p}.bin")])
        dynamic = {}
        for var, directory in dynamic_dirs.items():
            dynamic[var] = read_series(directory, var)
        static = {var: read_raster(p) for var, p in static_paths.items()}

        fusion_cfg = config.get("fusion") or []
        if fusion_cfg:
            current = stage("fuse")
            for entry in fusion_cfg:
                var = entry["variable"]
                p1 = ScenePair(read_timed(resolve(entry["pair1"]["fine"])), read_timed(resolve(entry["pair1"]["coarse"])))
                p2 = ScenePair(read_timed(resolve(entry["pair2"]["fine"])), read_timed(resolve(entry["pair2"]["coarse"])))
                coarse_paths = [resolve(c) for c in entry.get("coarse", [])]
                if "coarse_dir" in entry:
                    coarse_paths += sorted(
                        m.with_suffix("") for m in resolve(entry["coarse_dir"]).glob(f"{entry.get('coarse_variable', var)}_*.json")
                    )
                inputs.extend(Path(f"{p}.json") for p in coarse_paths)
                params = FusionParams(**entry.get("params", {}))
                fuser = StarfmFuser(method=entry.get("method", "estarfm"), n_jobs=threads, **vars(params)).fit(p1, p2)
                series = dict(dynamic.get(var, {}))
                series[p1.date] = p1.fine.raster
                series[p2.date] = p2.fine.raster
                for cp in coarse_paths:
                    ctp = read_timed(cp)
                    if ctp.date in (p1.date, p2.date):
                        continue
                    fused = fuser.predict(ctp)
                    series[ctp.date] = fused.raster
                    outputs[f"fused/{dated_name(var, ctp.date)}"] = write_raster(fused.raster, out / "fused" / dated_name(var, ctp.date))
                dynamic[var] = series

        current = "resample"
        stack = PredictorStack(dynamic, static) if grid is None else PredictorStack(dynamic, static).resampled(grid)

        current = stage("train")
        cfg = TrainConfig.from_dict(dict({"seed": seed}, **config.get("train", {})))
        matrix = build_training_table(stack, sites)
        model = train(matrix.table, matrix.labels, cfg)
        model_path = out / "model.json"
        save_model(model, model_path)
        outputs["model.json"] = model_path
        reports["drops"] = matrix.drops
        reports["n_rows"] = matrix.n_rows

        dates = [parse_date(d) for d in config.get("predict_dates", [])]
        if dates:
            current = stage("predict")
            for d in dates:
                sm = upscale_predict(model, stack, d, threads=threads)
                outputs[f"maps/{dated_name('sm', d)}"] = write_raster(sm.raster, out / "maps" / dated_name("sm", d))

        vcfg = config.get("validation", {"modes": [FOUR_FOLD]})
        if vcfg:
            current = stage("validate")
            k = int(vcfg.get("k", 4))
            split_seed = int(vcfg.get("seed", seed))
            for mode in vcfg.get("modes", [FOUR_FOLD]):
                plan = make_split(sites, mode, k=k, seed=split_seed)
                rep = cross_validate_matrix(matrix, plan, cfg, threads=threads)
                reports[mode] = rep
                outputs[f"metrics_{mode}.json"] = _dump(rep.to_dict(), out / f"metrics_{mode}.json")
            if vcfg.get("permutation_control", False):
                plan = make_split(sites, FOUR_FOLD, k=k, seed=split_seed)
                rep = cross_validate_matrix(matrix, plan, cfg, threads=threads, permute_seed=seed)
                reports["control"] = rep
                outputs["metrics_control.json"] = _dump(rep.to_dict(), out / "metrics_control.json")

        shap_cfg = config.get("shap")
        if shap_cfg:
            current = stage("shap")
            max_rows = int(shap_cfg.get("max_rows", 200)) if isinstance(shap_cfg, dict) else 200
            X = matrix.table.values[:max_rows]
            phi, base_value = tree_shap_many(model, X)
            preds = model.predict(X)
            outputs["shap.csv"] = write_shap_csv(out / "shap.csv", matrix.table.feature_names, phi, base_value, preds)
            summary = shap_summary(list(phi), matrix.table.feature_names)
            outputs["shap_summary.json"] = _dump(summary_to_dict(summary), out / "shap_summary.json")

        if config.get("plots", False):
            current = stage("plots")
            for mode in [m for m in reports if m not in ("drops", "n_rows")]:
                data = reports[mode].to_dict()
                outputs[f"plots/taylor_{mode}.svg"] = plots.write_svg(plots.taylor_svg_from_metrics(data), out / "plots" / f"taylor_{mode}.svg")
                outputs[f"plots/density_{mode}.svg"] = plots.write_svg(
                    plots.density_svg(data["pairs"]["obs"], data["pairs"]["pred"], xlabel="observed SM", ylabel="upscaled SM"),
                    out / "plots" / f"density_{mode}.svg",
                )
            if "shap_summary.json" in outputs:
                summary_doc = json.loads(outputs["shap_summary.json"].read_text())
                outputs["plots/violin_shap.svg"] = plots.write_svg(plots.violin_svg(summary_doc), out / "plots" / "violin_shap.svg")
    except SmupError as exc:
        raise ExperimentError(current, exc) from exc
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise ExperimentError(current, exc) from exc

    manifest = build_manifest(config, seed, threads, inputs, outputs, out, stages)
    _dump(manifest, out / "manifest.json")
    return ExperimentResult(output_dir=out, outputs=outputs, manifest=manifest, reports=reports, model=model)


def _digest_entry(path: Path) -> dict:
    p = Path(path)
    if p.suffix == "" and Path(f"{p}.json").exists():
        return {"json": sha256_file(f"{p}.json"), "bin": sha256_file(f"{p}.bin")}
    return {"sha256": sha256_file(p)}


def build_manifest(config, seed, threads, inputs, outputs, out_dir, stages) -> dict:
    return {
        "config_sha256": canonical_config_sha256(config),
        "seed": seed,
        "threads": threads,
        "stages": list(dict.fromkeys(stages)),
        "inputs": {str(p): sha256_file(p) for p in inputs if Path(p).exists()},
        "outputs": {name: _digest_entry(p) for name, p in sorted(outputs.items())},
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }


def write_shap_csv(path, feature_names, phi, base_value, preds) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row_id", *feature_names, "base", "prediction"])
    for i, (row, p) in enumerate(zip(phi, preds)):
        w.writerow([i, *(repr(float(v)) for v in row), repr(float(base_value)), repr(float(p))])
    path.write_text(buf.getvalue())
    return path


__all__ = [
    "ExperimentError",
    "GridMismatchError",
    "PredictorStack",
    "SiteRecord",
    "TrainingMatrix",
    "build_training_table",
    "load_stack",
    "read_sites_csv",
    "run_experiment",
    "upscale_predict",
    "write_sites_csv",
]
