"""Geo-referenced rasters on a regular WGS84 grid.

Cell membership is half-open in index space: with column coordinate
``u = (lon - xll) / cellsize`` and row coordinate
``v = (top - lat) / cellsize`` a point belongs to cell ``(floor(v), floor(u))``.
A point on a shared edge therefore goes to the cell with the greater index,
and points on the outer east/south boundary are folded into the last cell.

Values are stored as float32 (row 0 northernmost); every statistic is
accumulated in float64.
"""

from __future__ import annotations

import datetime as dt
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from smup.exceptions import GridMismatchError, InvalidInputError, MalformedInputError

CRS = "EPSG:4326"
DEFAULT_NODATA = -9999.0
DEFAULT_CELLSIZE = 0.001
_SNAP = 1e-9
_DATED_NAME = re.compile(r"^(?P<var>.+)_(?P<date>\d{4}-\d{2}-\d{2})$")


@dataclass(frozen=True)
class GeoGrid:
    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    crs: str = CRS

    def __post_init__(self):
        if int(self.ncols) < 1 or int(self.nrows) < 1:
            raise InvalidInputError(f"grid must have at least one cell, got {self.nrows}x{self.ncols}")
        if not (np.isfinite(self.cellsize) and self.cellsize > 0):
            raise InvalidInputError(f"cellsize must be positive, got {self.cellsize}")
        if not (np.isfinite(self.xll) and np.isfinite(self.yll)):
            raise InvalidInputError("grid origin must be finite")
        if self.crs != CRS:
            raise InvalidInputError(f"only {CRS} is supported, got {self.crs!r}")
        object.__setattr__(self, "ncols", int(self.ncols))
        object.__setattr__(self, "nrows", int(self.nrows))
        object.__setattr__(self, "xll", float(self.xll))
        object.__setattr__(self, "yll", float(self.yll))
        object.__setattr__(self, "cellsize", float(self.cellsize))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def top(self) -> float:
        return self.yll + self.nrows * self.cellsize

    @property
    def right(self) -> float:
        return self.xll + self.ncols * self.cellsize

    @classmethod
    def from_extent(cls, west, south, east, north, cellsize=DEFAULT_CELLSIZE) -> "GeoGrid":
        """Smallest grid anchored at (west, south) covering the extent."""
        ncols = int(np.ceil((east - west) / cellsize - _SNAP))
        nrows = int(np.ceil((north - south) / cellsize - _SNAP))
        return cls(ncols=max(ncols, 1), nrows=max(nrows, 1), xll=west, yll=south, cellsize=cellsize)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell-center longitudes (ncols,) and latitudes (nrows,), north first."""
        cs = self.cellsize
        lon = self.xll + (np.arange(self.ncols) + 0.5) * cs
        lat = self.yll + (self.nrows - np.arange(self.nrows) - 0.5) * cs
        return lon, lat

    def cell_index(self, lon, lat) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row/col of the cell containing each point, plus an inside mask."""
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        u = _snap((lon - self.xll) / self.cellsize)
        v = _snap((self.top - lat) / self.cellsize)
        inside = (u >= 0) & (u <= self.ncols) & (v >= 0) & (v <= self.nrows)
        col = np.clip(np.floor(np.where(inside, u, 0)), 0, self.ncols - 1).astype(np.intp)
        row = np.clip(np.floor(np.where(inside, v, 0)), 0, self.nrows - 1).astype(np.intp)
        return row, col, inside

    def to_dict(self) -> dict:
        return {
            "ncols": self.ncols,
            "nrows": self.nrows,
            "xll": self.xll,
            "yll": self.yll,
            "cellsize": self.cellsize,
            "crs": self.crs,
        }


def _snap(coord: np.ndarray) -> np.ndarray:
    nearest = np.round(coord)
    return np.where(np.abs(coord - nearest) < _SNAP, nearest, coord)


class Raster:
    """A 2-D float32 grid of measurements with a nodata sentinel.

    Non-finite input values are coerced to ``nodata`` on construction.
    """

    __slots__ = ("grid", "values", "nodata")

    def __init__(self, grid: GeoGrid, values, nodata: float = DEFAULT_NODATA):
        arr = np.array(values, dtype=np.float32)
        if arr.ndim == 1 and arr.size == grid.ncols * grid.nrows:
            arr = arr.reshape(grid.shape)
        if arr.shape != grid.shape:
            raise InvalidInputError(f"values shape {arr.shape} does not match grid {grid.shape}")
        nodata = float(nodata)
        if not np.isfinite(nodata):
            raise InvalidInputError("nodata sentinel must be finite")
        arr[~np.isfinite(arr)] = np.float32(nodata)
        arr.setflags(write=False)
        self.grid = grid
        self.values = arr
        self.nodata = nodata

    @property
    def mask(self) -> np.ndarray:
        """True where the cell holds a valid measurement."""
        return self.values != np.float32(self.nodata)

    def as_masked(self) -> np.ndarray:
        """float64 copy with NaN at nodata cells."""
        out = self.values.astype(np.float64)
        out[~self.mask] = np.nan
        return out

    @classmethod
    def from_masked(cls, grid: GeoGrid, values, nodata: float = DEFAULT_NODATA) -> "Raster":
        """Build from an array where NaN marks missing cells."""
        return cls(grid, values, nodata)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.nodata == other.nodata
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return f"Raster({self.grid.nrows}x{self.grid.ncols}, nodata={self.nodata})"


@dataclass(frozen=True)
class TimedRaster:
    raster: Raster
    date: dt.date

    def __post_init__(self):
        if isinstance(self.date, str):
            object.__setattr__(self, "date", parse_date(self.date))
        elif isinstance(self.date, dt.datetime):
            object.__setattr__(self, "date", self.date.date())
        elif not isinstance(self.date, dt.date):
            raise InvalidInputError(f"not a calendar date: {self.date!r}")


def parse_date(text: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text)
    except (TypeError, ValueError) as exc:
        raise InvalidInputError(f"invalid ISO-8601 date {text!r}") from exc


def check_same_grid(*rasters: Raster) -> GeoGrid:
    grid = rasters[0].grid
    for r in rasters[1:]:
        if r.grid != grid:
            raise GridMismatchError(f"grid mismatch: {r.grid} vs {grid}")
    return grid


def resample_nearest(src: Raster, target: GeoGrid) -> Raster:
    """Nearest-neighbour resampling of ``src`` onto ``target``.

    Target cells whose center lies outside the source extent, or whose
    nearest source cell is nodata, become nodata.
    """
    if src.grid == target:
        return Raster(target, src.values, src.nodata)
    lon, lat = target.centers()
    row, _, in_r = src.grid.cell_index(np.zeros_like(lat) + src.grid.xll, lat)
    _, col, in_c = src.grid.cell_index(lon, np.zeros_like(lon) + src.grid.yll)
    out = src.values[np.ix_(row, col)].copy()
    out[~in_r, :] = np.float32(src.nodata)
    out[:, ~in_c] = np.float32(src.nodata)
    return Raster(target, out, src.nodata)


def aggregate_mean(fine: Raster, coarse: GeoGrid) -> Raster:
    """Mean of the valid fine cells whose centers fall in each coarse cell."""
    if coarse.cellsize < fine.grid.cellsize:
        raise InvalidInputError("coarse cellsize must not be smaller than the fine cellsize")
    lon, lat = fine.grid.centers()
    row, _, in_r = coarse.cell_index(np.zeros_like(lat) + coarse.xll, lat)
    _, col, in_c = coarse.cell_index(lon, np.zeros_like(lon) + coarse.yll)
    keep = fine.mask & in_r[:, None] & in_c[None, :]
    flat = (row[:, None] * coarse.ncols + col[None, :])[keep]
    vals = fine.values[keep].astype(np.float64)
    n = coarse.ncols * coarse.nrows
    sums = np.bincount(flat, weights=vals, minlength=n)
    counts = np.bincount(flat, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return Raster(coarse, mean.reshape(coarse.shape), fine.nodata)


def sample_at(r: Raster, lon: float, lat: float) -> float:
    """Value of the cell containing (lon, lat), or ``r.nodata``."""
    row, col, inside = r.grid.cell_index(lon, lat)
    if not bool(inside):
        return r.nodata
    return float(r.values[int(row), int(col)])


def sample_many(r: Raster, lon, lat) -> np.ndarray:
    """Vectorised :func:`sample_at`; NaN where outside or masked."""
    row, col, inside = r.grid.cell_index(lon, lat)
    vals = r.values[row, col].astype(np.float64)
    vals[~inside | (r.values[row, col] == np.float32(r.nodata))] = np.nan
    return vals


# -- file format -------------------------------------------------------------


def _base(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p


def write_raster(raster: Raster, path) -> Path:
    """Write ``<path>.json`` + ``<path>.bin``; returns the base path."""
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    g = raster.grid
    meta = {
        "ncols": g.ncols,
        "nrows": g.nrows,
        "xll": g.xll,
        "yll": g.yll,
        "cellsize": g.cellsize,
        "nodata": raster.nodata,
        "crs": g.crs,
        "dtype": "f32le",
        "order": "row-major-north-first",
    }
    Path(f"{base}.json").write_text(json.dumps(meta, indent=2) + "\n")
    Path(f"{base}.bin").write_bytes(raster.values.astype("<f4").tobytes())
    return base


def read_raster(path) -> Raster:
    base = _base(path)
    try:
        meta = json.loads(Path(f"{base}.json").read_text())
    except json.JSONDecodeError as exc:
        raise MalformedInputError(f"{base}.json: {exc}") from exc
    if meta.get("dtype", "f32le") != "f32le" or meta.get("order", "row-major-north-first") != "row-major-north-first":
        raise MalformedInputError(f"{base}.json: unsupported dtype/order")
    try:
        grid = GeoGrid(
            ncols=meta["ncols"],
            nrows=meta["nrows"],
            xll=meta["xll"],
            yll=meta["yll"],
            cellsize=meta["cellsize"],
            crs=meta.get("crs", CRS),
        )
        nodata = meta.get("nodata", DEFAULT_NODATA)
    except (KeyError, TypeError) as exc:
        raise MalformedInputError(f"{base}.json: missing or invalid field {exc}") from exc
    data = np.frombuffer(Path(f"{base}.bin").read_bytes(), dtype="<f4")
    if data.size != grid.ncols * grid.nrows:
        raise MalformedInputError(f"{base}.bin holds {data.size} values, expected {grid.ncols * grid.nrows}")
    return Raster(grid, data.reshape(grid.shape), nodata)


def dated_name(var: str, date: dt.date) -> str:
    return f"{var}_{date.isoformat()}"


def split_dated_name(path) -> tuple[str, dt.date]:
    """``<var>_<YYYY-MM-DD>`` -> (var, date)."""
    m = _DATED_NAME.match(_base(path).name)
    if not m:
        raise InvalidInputError(f"{path}: expected a name like <var>_<YYYY-MM-DD>")
    return m.group("var"), parse_date(m.group("date"))


def read_timed(path) -> TimedRaster:
    _, date = split_dated_name(path)
    return TimedRaster(read_raster(path), date)


def read_series(directory, var: str) -> dict[dt.date, Raster]:
    """All ``<var>_<date>`` rasters in ``directory`` keyed by date."""
    out = {}
    for meta in sorted(Path(directory).glob(f"{var}_*.json")):
        name, date = split_dated_name(meta)
        if name == var:
            out[date] = read_raster(meta)
    return out
