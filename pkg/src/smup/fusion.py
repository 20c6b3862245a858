"""ESTARFM and ubESTARFM fusion of fine-infrequent and coarse-daily rasters.

All inputs are expected on one common fine grid (coarse rasters already
resampled onto it). For every output pixel a moving window is searched for
spectrally similar pixels; their coarse increments between a reference date
and the prediction date are weighted, scaled by a conversion coefficient and
added to the reference fine value. The two reference-date predictions are
blended with temporal weights derived from the amount of coarse change.

Concrete formulation used here (single band):

* similar pixel: ``|F(x, t_k) - F(c, t_k)| <= 2 * sigma_k / num_classes`` for
  both reference dates, with ``sigma_k`` the whole-scene sample standard
  deviation of the fine raster;
* ``R_i`` is the correlation of the fine and coarse 2-vectors over the two
  dates, i.e. the sign of ``(F2 - F1) * (C2 - C1)`` (0 when undefined);
* ``d_i = 1 + dist / (window / 2)``, ``D_i = (1 - R_i) * d_i + eps``,
  ``W_i = (1 / D_i) / sum(1 / D_j)``;
* conversion coefficient: OLS slope of fine on coarse over the pooled
  two-date similar-pixel sample, 1.0 when degenerate or ``> coeff_clip``;
* temporal weights: inverse absolute window-mean coarse change;
* fewer than ``min_similar`` similar pixels: the center's own coarse
  increment is used.

ubESTARFM fixes the conversion coefficient to 1 and then removes the local
bias of the fused increment block by block (blocks of ``window`` cells
aligned at the north-west corner), so that within every block the mean fused
increment equals the mean temporally weighted coarse increment.

The compiled kernel visits each pixel's window in row-major order and reads
only immutable inputs, so results do not depend on how output rows are
tiled across threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from smup.exceptions import InvalidInputError
from smup.grid import Raster, TimedRaster, check_same_grid


@dataclass(frozen=True)
class FusionParams:
    window: int = 51
    num_classes: int = 4
    min_similar: int = 5
    coeff_clip: float = 5.0
    variance_eps: float = 1e-12

    def __post_init__(self):
        if self.window < 3 or self.window % 2 != 1:
            raise InvalidInputError(f"window must be odd and >= 3, got {self.window}")
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be >= 1")
        if self.min_similar < 1:
            raise InvalidInputError("min_similar must be >= 1")
        if not self.coeff_clip > 0:
            raise InvalidInputError("coeff_clip must be positive")
        if not self.variance_eps > 0:
            raise InvalidInputError("variance_eps must be positive")


@dataclass(frozen=True)
class ScenePair:
    fine: TimedRaster
    coarse: TimedRaster

    def __post_init__(self):
        if self.fine.date != self.coarse.date:
            raise InvalidInputError(
                f"scene pair dates differ: fine {self.fine.date} vs coarse {self.coarse.date}"
            )
        check_same_grid(self.fine.raster, self.coarse.raster)

    @property
    def date(self):
        return self.fine.date


# -- per-window building blocks ---------------------------------------------
# Window arrays are float64 with NaN for missing cells.


def scene_sigma(fine: np.ndarray) -> float:
    vals = fine[np.isfinite(fine)]
    return float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0


def select_similar_pixels(win_fine_t1, win_fine_t2, center, sigma1, sigma2, params, valid=None):
    """Row-major flat indices of pixels similar to ``center`` at both dates.

    ``center`` is a (row, col) index into the window. Returns ``None`` when
    the center is missing at either date (the output pixel is skipped).
    """
    f1 = np.asarray(win_fine_t1, dtype=np.float64)
    f2 = np.asarray(win_fine_t2, dtype=np.float64)
    c1, c2 = f1[center], f2[center]
    if not (np.isfinite(c1) and np.isfinite(c2)):
        return None
    ok = np.isfinite(f1) & np.isfinite(f2)
    if valid is not None:
        ok &= valid
    with np.errstate(invalid="ignore"):
        sim = ok & (np.abs(f1 - c1) <= sigma1 * 2.0 / params.num_classes)
        sim &= np.abs(f2 - c2) <= sigma2 * 2.0 / params.num_classes
    sim[center] = True
    return np.flatnonzero(sim.ravel())


def spectral_correlation(f1, f2, c1, c2):
    """Pearson correlation of (f1, f2) with (c1, c2); 0 where undefined."""
    prod = (np.asarray(f2, dtype=np.float64) - f1) * (np.asarray(c2, dtype=np.float64) - c1)
    return np.sign(prod)


def similarity_weights(indices, shape, center, r, params):
    """Normalised weights ``W_i`` for the similar pixels ``indices``."""
    rows, cols = np.unravel_index(indices, shape)
    dist = np.hypot(rows - center[0], cols - center[1])
    d = 1.0 + dist / (params.window / 2.0)
    inv = 1.0 / ((1.0 - np.asarray(r, dtype=np.float64)) * d + params.variance_eps)
    return inv / inv.sum()


def conversion_coefficient(fine_t1, fine_t2, coarse_t1, coarse_t2, params) -> float:
    """Pooled two-date OLS slope of fine on coarse with degeneracy fallback."""
    x = np.concatenate([np.asarray(coarse_t1, np.float64).ravel(), np.asarray(coarse_t2, np.float64).ravel()])
    y = np.concatenate([np.asarray(fine_t1, np.float64).ravel(), np.asarray(fine_t2, np.float64).ravel()])
    if x.size == 0:
        return 1.0
    xc = x - x.mean()
    var = float(np.mean(xc * xc))
    if var < params.variance_eps:
        return 1.0
    slope = float(np.sum(xc * (y - y.mean())) / np.sum(xc * xc))
    if not np.isfinite(slope) or abs(slope) > params.coeff_clip:
        return 1.0
    return slope


def temporal_weights(coarse_t1, coarse_t2, coarse_tp, params) -> tuple[float, float]:
    """(T1, T2) from the inverse window-mean coarse change to ``tp``."""
    c1 = np.asarray(coarse_t1, np.float64)
    c2 = np.asarray(coarse_t2, np.float64)
    cp = np.asarray(coarse_tp, np.float64)
    inv = []
    for ck in (c1, c2):
        joint = np.isfinite(ck) & np.isfinite(cp)
        if not joint.any():
            raise InvalidInputError("no jointly valid coarse pixels in window")
        delta = abs(float(np.mean(cp[joint] - ck[joint])))
        inv.append(1.0 / (delta + params.variance_eps))
    total = inv[0] + inv[1]
    return inv[0] / total, inv[1] / total


def fuse_pixel(f1, f2, c1, c2, cp, row, col, params, unbiased=False, sigmas=None):
    """Slow reference prediction for one pixel, built from the window helpers.

    Arrays are whole scenes (NaN = missing). Returns NaN for skipped pixels.
    The ubESTARFM block debiasing is not applied here.
    """
    if sigmas is None:
        sigmas = (scene_sigma(f1), scene_sigma(f2))
    h = params.window // 2
    r0, r1 = max(row - h, 0), min(row + h + 1, f1.shape[0])
    q0, q1 = max(col - h, 0), min(col + h + 1, f1.shape[1])
    win = [a[r0:r1, q0:q1] for a in (f1, f2, c1, c2, cp)]
    center = (row - r0, col - q0)
    valid = np.logical_and.reduce([np.isfinite(w) for w in win])
    if not valid[center]:
        return np.nan
    idx = select_similar_pixels(win[0], win[1], center, sigmas[0], sigmas[1], params, valid=valid)
    t1, t2 = temporal_weights(win[2], win[3], win[4], params)
    fc1, fc2 = win[0][center], win[1][center]
    if idx.size < params.min_similar:
        return t1 * (fc1 + win[4][center] - win[2][center]) + t2 * (fc2 + win[4][center] - win[3][center])
    s = [w.ravel()[idx] for w in win]
    r = spectral_correlation(s[0], s[1], s[2], s[3])
    w = similarity_weights(idx, win[0].shape, center, r, params)
    v = 1.0 if unbiased else conversion_coefficient(s[0], s[1], s[2], s[3], params)
    p1 = fc1 + np.sum(w * v * (s[4] - s[2]))
    p2 = fc2 + np.sum(w * v * (s[4] - s[3]))
    return t1 * p1 + t2 * p2


# -- compiled kernel ----------------------------------------------------------


@njit(cache=True, nogil=True)
def _fuse_rows(f1, f2, c1, c2, cp, valid, a, b, th1, th2, window, min_similar, coeff_clip, eps, unbiased, out, t1_out, base_out):
    nrows, ncols = f1.shape
    h = window // 2
    half = window / 2.0
    for r in range(a, b):
        i0, i1 = max(r - h, 0), min(r + h + 1, nrows)
        for c in range(ncols):
            k = r - a
            if not valid[r, c]:
                out[k, c] = np.nan
                t1_out[k, c] = np.nan
                base_out[k, c] = np.nan
                continue
            j0, j1 = max(c - h, 0), min(c + h + 1, ncols)
            cf1, cf2, cc1 = f1[r, c], f2[r, c], c1[r, c]
            count = 0
            sw = 0.0
            swd1 = 0.0
            swd2 = 0.0
            sa = 0.0
            sb = 0.0
            saa = 0.0
            sab = 0.0
            st1 = 0.0
            st2 = 0.0
            nt1 = 0
            nt2 = 0
            for i in range(i0, i1):
                for j in range(j0, j1):
                    p = cp[i, j]
                    if np.isfinite(p):
                        if np.isfinite(c1[i, j]):
                            st1 += p - c1[i, j]
                            nt1 += 1
                        if np.isfinite(c2[i, j]):
                            st2 += p - c2[i, j]
                            nt2 += 1
                    if not valid[i, j]:
                        continue
                    if abs(f1[i, j] - cf1) > th1 or abs(f2[i, j] - cf2) > th2:
                        continue
                    count += 1
                    prod = (f2[i, j] - f1[i, j]) * (c2[i, j] - c1[i, j])
                    one_minus_r = 0.0 if prod > 0 else (2.0 if prod < 0 else 1.0)
                    dist = np.sqrt((i - r) ** 2 + (j - c) ** 2)
                    w = 1.0 / (one_minus_r * (1.0 + dist / half) + eps)
                    sw += w
                    swd1 += w * (p - c1[i, j])
                    swd2 += w * (p - c2[i, j])
                    if not unbiased:
                        # centred on the target pixel; the slope is shift invariant
                        a1 = c1[i, j] - cc1
                        a2 = c2[i, j] - cc1
                        b1 = f1[i, j] - cf1
                        b2 = f2[i, j] - cf1
                        sa += a1 + a2
                        sb += b1 + b2
                        saa += a1 * a1 + a2 * a2
                        sab += a1 * b1 + a2 * b2
            inv1 = 1.0 / (abs(st1 / nt1) + eps)
            inv2 = 1.0 / (abs(st2 / nt2) + eps)
            t1 = inv1 / (inv1 + inv2)
            t2 = 1.0 - t1
            dcc1 = cp[r, c] - cc1
            dcc2 = cp[r, c] - c2[r, c]
            if count < min_similar:
                val = t1 * (cf1 + dcc1) + t2 * (cf2 + dcc2)
            else:
                v = 1.0
                if not unbiased:
                    n = 2.0 * count
                    sxx = saa - sa * sa / n
                    if sxx / n >= eps:
                        slope = (sab - sa * sb / n) / sxx
                        if abs(slope) <= coeff_clip:
                            v = slope
                val = t1 * (cf1 + v * swd1 / sw) + t2 * (cf2 + v * swd2 / sw)
            out[k, c] = val
            t1_out[k, c] = t1
            base_out[k, c] = t1 * cf1 + t2 * cf2


def _debias_blocks(out, target_inc, base, block):
    """Shift the fused increment so block means match the coarse increment."""
    out = out.copy()
    nrows, ncols = out.shape
    for r in range(0, nrows, block):
        for c in range(0, ncols, block):
            sl = (slice(r, r + block), slice(c, c + block))
            ok = np.isfinite(out[sl])
            if not ok.any():
                continue
            inc = (out[sl] - base[sl])[ok]
            shift = np.mean(target_inc[sl][ok]) - np.mean(inc)
            blk = out[sl]
            blk[ok] += shift
    return out


def fuse_arrays(f1, f2, c1, c2, cp, params: FusionParams | None = None, unbiased=False, threads=1, debias=True):
    """Fuse NaN-masked float arrays; returns ``(out, t1, base)``.

    ``base`` is ``T1 * F(t1) + T2 * F(t2)`` at each pixel, so ``out - base``
    is the fused increment.
    """
    params = params or FusionParams()
    f1, f2, c1, c2, cp = (np.ascontiguousarray(x, dtype=np.float64) for x in (f1, f2, c1, c2, cp))
    shape = f1.shape
    if f1.ndim != 2 or any(x.shape != shape for x in (f2, c1, c2, cp)):
        raise InvalidInputError("all fusion inputs must be 2-D arrays of one shape")
    sigmas = (scene_sigma(f1), scene_sigma(f2))
    valid = np.isfinite(f1) & np.isfinite(f2) & np.isfinite(c1) & np.isfinite(c2) & np.isfinite(cp)
    th1 = sigmas[0] * 2.0 / params.num_classes
    th2 = sigmas[1] * 2.0 / params.num_classes
    out = np.empty(shape)
    t1 = np.empty(shape)
    base = np.empty(shape)

    nrows = shape[0]
    threads = max(int(threads or 1), 1)
    step = max(1, -(-nrows // threads))
    tiles = [(r, min(r + step, nrows)) for r in range(0, nrows, step)]

    def run(rows):
        a, b = rows
        _fuse_rows(
            f1, f2, c1, c2, cp, valid, a, b, th1, th2, params.window, params.min_similar,
            params.coeff_clip, params.variance_eps, unbiased, out[a:b], t1[a:b], base[a:b],
        )

    if threads == 1 or len(tiles) == 1:
        for t in tiles:
            run(t)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, tiles))
    if unbiased and debias:
        with np.errstate(invalid="ignore"):
            target = t1 * (cp - c1) + (1.0 - t1) * (cp - c2)
        out = _debias_blocks(out, target, base, params.window)
    return out, t1, base


# -- raster-level API ---------------------------------------------------------


def _check_inputs(pair1: ScenePair, pair2: ScenePair, coarse_tp: TimedRaster):
    if pair1.date == pair2.date:
        raise InvalidInputError(f"reference dates must differ, both are {pair1.date}")
    return check_same_grid(
        pair1.fine.raster, pair1.coarse.raster, pair2.fine.raster, pair2.coarse.raster, coarse_tp.raster
    )


def _fuse(pair1, pair2, coarse_tp, params, unbiased, threads, return_diagnostics):
    grid = _check_inputs(pair1, pair2, coarse_tp)
    arrays = [
        r.as_masked()
        for r in (pair1.fine.raster, pair2.fine.raster, pair1.coarse.raster, pair2.coarse.raster, coarse_tp.raster)
    ]
    out, t1, base = fuse_arrays(*arrays, params=params or FusionParams(), unbiased=unbiased, threads=threads)
    fused = TimedRaster(Raster(grid, out, pair1.fine.raster.nodata), coarse_tp.date)
    if return_diagnostics:
        return fused, {"t1": t1, "t2": 1.0 - t1, "base": base}
    return fused


def estarfm_fuse(pair1, pair2, coarse_tp, params=None, threads=1, return_diagnostics=False):
    """Predict the fine raster at ``coarse_tp.date`` with ESTARFM."""
    return _fuse(pair1, pair2, coarse_tp, params, False, threads, return_diagnostics)


def ub_estarfm_fuse(pair1, pair2, coarse_tp, params=None, threads=1, return_diagnostics=False):
    """Predict the fine raster at ``coarse_tp.date`` with ubESTARFM."""
    return _fuse(pair1, pair2, coarse_tp, params, True, threads, return_diagnostics)


class StarfmFuser(BaseEstimator):
    """Estimator wrapper: ``fit`` on two reference pairs, ``predict`` per date.

    Parameters
    ----------
    method : {"estarfm", "ubestarfm"}
    window, num_classes, min_similar, coeff_clip, variance_eps
        See :class:`FusionParams`.
    n_jobs : int
        Row tiles evaluated concurrently; results do not depend on it.
    """

    def __init__(
        self,
        method="estarfm",
        window=51,
        num_classes=4,
        min_similar=5,
        coeff_clip=5.0,
        variance_eps=1e-12,
        n_jobs=1,
    ):
        self.method = method
        self.window = window
        self.num_classes = num_classes
        self.min_similar = min_similar
        self.coeff_clip = coeff_clip
        self.variance_eps = variance_eps
        self.n_jobs = n_jobs

    def _params(self) -> FusionParams:
        return FusionParams(
            window=self.window,
            num_classes=self.num_classes,
            min_similar=self.min_similar,
            coeff_clip=self.coeff_clip,
            variance_eps=self.variance_eps,
        )

    def fit(self, pair1: ScenePair, pair2: ScenePair):
        if self.method not in ("estarfm", "ubestarfm"):
            raise InvalidInputError(f"unknown fusion method {self.method!r}")
        if pair1.date == pair2.date:
            raise InvalidInputError(f"reference dates must differ, both are {pair1.date}")
        check_same_grid(pair1.fine.raster, pair2.fine.raster)
        self.params_ = self._params()
        self.pairs_ = (pair1, pair2)
        self.grid_ = pair1.fine.raster.grid
        return self

    def predict(self, coarse_tp: TimedRaster) -> TimedRaster:
        check_is_fitted(self, "pairs_")
        fuse = ub_estarfm_fuse if self.method == "ubestarfm" else estarfm_fuse
        return fuse(*self.pairs_, coarse_tp, params=self.params_, threads=self.n_jobs)

    def fit_predict(self, pair1, pair2, coarse_tp):
        return self.fit(pair1, pair2).predict(coarse_tp)

    def get_fusion_params(self) -> dict:
        return asdict(self._params())
