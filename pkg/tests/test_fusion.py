import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from oracles import estarfm_oracle
from smup.exceptions import GridMismatchError, InvalidInputError
from smup.fusion import (
    FusionParams,
    ScenePair,
    StarfmFuser,
    conversion_coefficient,
    estarfm_fuse,
    fuse_arrays,
    fuse_pixel,
    select_similar_pixels,
    similarity_weights,
    temporal_weights,
    ub_estarfm_fuse,
)
from smup.grid import GeoGrid, Raster, TimedRaster

D1, D2, DP = dt.date(2017, 4, 2), dt.date(2017, 4, 18), dt.date(2017, 4, 10)


def smooth(rng, shape, waves=3):
    y, x = np.mgrid[0 : shape[0], 0 : shape[1]] / max(shape)
    out = np.zeros(shape)
    for _ in range(waves):
        kx, ky, ph = rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0, 6.3)
        out += np.sin(2 * np.pi * (kx * x + ky * y) + ph)
    return out


def scene(rng, shape=(16, 14)):
    c1 = 0.3 + 0.05 * smooth(rng, shape)
    c2 = c1 + 0.02 * smooth(rng, shape) + 0.01
    cp = c1 + 0.015 * smooth(rng, shape) + 0.005
    f1 = 1.3 * c1 + 0.02 * rng.standard_normal(shape)
    f2 = 1.3 * c2 + 0.02 * rng.standard_normal(shape)
    return f1, f2, c1, c2, cp


def rasters(f1, f2, c1, c2, cp, grid=None):
    grid = grid or GeoGrid(ncols=f1.shape[1], nrows=f1.shape[0], xll=146.0, yll=-35.0, cellsize=0.001)
    p1 = ScenePair(TimedRaster(Raster(grid, f1), D1), TimedRaster(Raster(grid, c1), D1))
    p2 = ScenePair(TimedRaster(Raster(grid, f2), D2), TimedRaster(Raster(grid, c2), D2))
    return p1, p2, TimedRaster(Raster(grid, cp), DP)


# -- window helpers ------------------------------------------------------------


P4 = FusionParams(window=5, num_classes=4, min_similar=3)


def test_similar_homogeneous_window_selects_all():
    w = np.full((5, 5), 0.5)
    assert select_similar_pixels(w, w, (2, 2), 0.1, 0.1, P4).tolist() == list(range(25))


def test_similar_threshold_hand_window():
    # sigma 0.1, four classes -> threshold 0.05 at both dates
    f1 = np.array(
        [
            [0.50, 0.56, 0.46, 0.40, 0.54],
            [0.53, 0.60, 0.549, 0.50, 0.49],
            [0.20, 0.47, 0.50, 0.51, 0.90],
            [0.549, 0.44, 0.52, 0.48, 0.50],
            [0.46, 0.50, 0.50, 0.50, 0.549],
        ]
    )
    f2 = np.full((5, 5), 0.5)
    f2[4, 1] = 0.58
    f2[3, 3] = 0.451
    got = select_similar_pixels(f1, f2, (2, 2), 0.1, 0.1, P4)
    expected = [0, 2, 4, 5, 7, 8, 9, 11, 12, 13, 15, 17, 18, 19, 20, 22, 23, 24]
    assert got.tolist() == expected


def test_similar_none_pass_returns_centre():
    f = np.arange(25, dtype=float).reshape(5, 5)
    assert select_similar_pixels(f, f, (2, 2), 0.1, 0.1, P4).tolist() == [12]


def test_similar_missing_centre():
    f = np.full((5, 5), 0.5)
    g = f.copy()
    g[2, 2] = np.nan
    assert select_similar_pixels(f, g, (2, 2), 0.1, 0.1, P4) is None


def test_conversion_identity_slope():
    c = np.array([0.1, 0.4, 0.2])
    assert conversion_coefficient(c, c + 0.3, c, c + 0.3, P4) == pytest.approx(1.0, abs=1e-12)


def test_conversion_affine_slope():
    # pooled sample (0,3),(1,5),(2,7): fine = 2 * coarse + 3
    v = conversion_coefficient(np.array([3.0, 5.0]), np.array([7.0]), np.array([0.0, 1.0]), np.array([2.0]), P4)
    assert v == pytest.approx(2.0, abs=1e-12)


def test_conversion_constant_coarse_falls_back():
    assert conversion_coefficient(np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.ones(2), np.ones(2), P4) == 1.0


def test_conversion_clip_falls_back():
    c = np.array([0.0, 1.0])
    assert conversion_coefficient(10 * c, 10 * c, c, c, P4) == 1.0


def test_temporal_symmetric():
    c1 = np.zeros(4)
    t1, t2 = temporal_weights(c1, c1, c1 + 1.0, P4)
    assert t1 == t2 == 0.5


def test_temporal_zero_change_dominates():
    c1 = np.zeros(4)
    t1, t2 = temporal_weights(c1, c1 - 1.0, c1, P4)
    assert t1 == pytest.approx(1.0, abs=1e-11)
    assert t2 == pytest.approx(0.0, abs=1e-11)


def test_temporal_constant_coarse():
    c = np.full(9, 0.2)
    assert temporal_weights(c, c, c, P4) == (0.5, 0.5)


def test_similarity_weights_sum_to_one_and_favour_near():
    idx = np.array([0, 6, 12])
    w = similarity_weights(idx, (5, 5), (2, 2), np.array([1.0, 1.0, 1.0]) * 0, P4)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    assert w[2] > w[1] > w[0]


def test_params_validation():
    with pytest.raises(InvalidInputError):
        FusionParams(window=4)
    with pytest.raises(InvalidInputError):
        FusionParams(num_classes=0)
    with pytest.raises(InvalidInputError):
        FusionParams(coeff_clip=0)


# -- kernel against the independent oracle ---------------------------------------


@pytest.mark.parametrize("unbiased", [False, True])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_kernel_matches_oracle(seed, unbiased):
    rng = np.random.default_rng(seed)
    f1, f2, c1, c2, cp = scene(rng)
    f1[3, 4] = np.nan
    cp[10, 2] = np.nan
    c2[0, 13] = np.nan
    out, _, _ = fuse_arrays(f1, f2, c1, c2, cp, params=P4, unbiased=unbiased, debias=False)
    ref = np.array(estarfm_oracle(*(a.tolist() for a in (f1, f2, c1, c2, cp)), window=5, min_similar=3, unbiased=unbiased))
    assert np.array_equal(np.isnan(out), np.isnan(ref))
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12, equal_nan=True)


def test_kernel_matches_oracle_with_centre_fallback():
    rng = np.random.default_rng(5)
    f1, f2, c1, c2, cp = scene(rng)
    params = FusionParams(window=3, min_similar=9, num_classes=8)
    out, _, _ = fuse_arrays(f1, f2, c1, c2, cp, params=params)
    ref = np.array(estarfm_oracle(*(a.tolist() for a in (f1, f2, c1, c2, cp)), window=3, num_classes=8, min_similar=9))
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_kernel_matches_window_reference():
    rng = np.random.default_rng(9)
    f1, f2, c1, c2, cp = scene(rng, (9, 9))
    out, _, _ = fuse_arrays(f1, f2, c1, c2, cp, params=P4)
    for r in range(9):
        for c in range(9):
            assert out[r, c] == pytest.approx(fuse_pixel(f1, f2, c1, c2, cp, r, c, P4), abs=1e-12)


def test_tiling_does_not_change_output():
    rng = np.random.default_rng(3)
    arrs = scene(rng, (40, 30))
    for unbiased in (False, True):
        a, _, _ = fuse_arrays(*arrs, params=FusionParams(window=7), unbiased=unbiased, threads=1)
        b, _, _ = fuse_arrays(*arrs, params=FusionParams(window=7), unbiased=unbiased, threads=6)
        assert a.tobytes() == b.tobytes()


# -- fusion properties -----------------------------------------------------------------


@pytest.mark.parametrize("fuse", [estarfm_fuse, ub_estarfm_fuse])
def test_identity_case(fuse):
    rng = np.random.default_rng(11)
    f1, _, c1, _, _ = scene(rng, (20, 20))
    out = fuse(*rasters(f1, f1, c1, c1, c1), params=FusionParams(window=9))
    np.testing.assert_allclose(out.raster.values, Raster(out.raster.grid, f1).values, rtol=0, atol=1e-6)


@pytest.mark.parametrize("fuse", [estarfm_fuse, ub_estarfm_fuse])
def test_homogeneous_shift(fuse):
    rng = np.random.default_rng(12)
    delta = 0.037
    f1 = 0.3 + 0.05 * smooth(rng, (20, 18))
    c1 = np.full(f1.shape, 0.25)
    out = fuse(*rasters(f1, f1, c1, c1, c1 + delta), params=FusionParams(window=9))
    np.testing.assert_allclose(out.raster.values, (f1 + delta).astype(np.float32), rtol=0, atol=1e-6)


def test_ub_preserves_fine_bias():
    rng = np.random.default_rng(13)
    b, delta, step = 0.08, 0.03, -0.05
    c1 = 0.2 + 0.04 * smooth(rng, (24, 24))
    c2 = c1 + step
    f1, f2 = c1 + b, c2 + b
    out = ub_estarfm_fuse(*rasters(f1, f2, c1, c2, c1 + delta), params=FusionParams(window=7))
    np.testing.assert_allclose(out.raster.values, (f1 + delta).astype(np.float32), rtol=0, atol=1e-6)


def test_ub_block_mean_increment_matches_coarse():
    rng = np.random.default_rng(14)
    arrs = scene(rng, (30, 26))
    params = FusionParams(window=7)
    out, t1, base = fuse_arrays(*arrs, params=params, unbiased=True)
    f1, f2, c1, c2, cp = arrs
    target = t1 * (cp - c1) + (1 - t1) * (cp - c2)
    for r0 in range(0, 30, 7):
        for c0 in range(0, 26, 7):
            blk = np.s_[r0 : r0 + 7, c0 : c0 + 7]
            assert abs(np.mean(out[blk] - base[blk]) - np.mean(target[blk])) < 1e-12


@pytest.mark.parametrize("fuse", [estarfm_fuse, ub_estarfm_fuse])
def test_nodata_propagates(fuse):
    rng = np.random.default_rng(15)
    f1, f2, c1, c2, cp = scene(rng)
    cp[4, 5] = np.nan
    out = fuse(*rasters(f1, f2, c1, c2, cp), params=FusionParams(window=5))
    assert not out.raster.mask[4, 5]
    assert out.raster.mask.sum() == cp.size - 1
    assert out.date == DP


def test_temporal_weights_in_unit_interval():
    rng = np.random.default_rng(16)
    _, diag = estarfm_fuse(*rasters(*scene(rng)), params=FusionParams(window=5), return_diagnostics=True)
    assert ((diag["t1"] >= 0) & (diag["t1"] <= 1)).all()
    np.testing.assert_allclose(diag["t1"] + diag["t2"], 1.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.2, 0.2))
def test_estarfm_identity_plus_constant_shift_property(seed, delta):
    rng = np.random.default_rng(seed)
    f1 = rng.uniform(0, 1, (10, 10))
    c1 = np.full((10, 10), 0.4)
    out, _, _ = fuse_arrays(f1, f1, c1, c1, c1 + delta, params=FusionParams(window=5))
    np.testing.assert_allclose(out, f1 + delta, rtol=0, atol=1e-9)


def test_grid_mismatch_rejected():
    rng = np.random.default_rng(17)
    f1, f2, c1, c2, cp = scene(rng)
    p1, p2, _ = rasters(f1, f2, c1, c2, cp)
    other = GeoGrid(ncols=14, nrows=16, xll=146.5, yll=-35.0, cellsize=0.001)
    with pytest.raises(GridMismatchError):
        estarfm_fuse(p1, p2, TimedRaster(Raster(other, cp), DP))


def test_pair_date_checks():
    rng = np.random.default_rng(18)
    f1, f2, c1, c2, cp = scene(rng)
    p1, _, ctp = rasters(f1, f2, c1, c2, cp)
    with pytest.raises(InvalidInputError):
        estarfm_fuse(p1, p1, ctp)
    with pytest.raises(InvalidInputError):
        ScenePair(p1.fine, TimedRaster(p1.coarse.raster, D2))


def test_fuser_estimator_api():
    rng = np.random.default_rng(19)
    p1, p2, ctp = rasters(*scene(rng))
    fuser = StarfmFuser(method="ubestarfm", window=5)
    assert clone(fuser).get_params()["window"] == 5
    assert fuser.get_fusion_params()["window"] == 5
    direct = ub_estarfm_fuse(p1, p2, ctp, params=FusionParams(window=5))
    assert fuser.fit_predict(p1, p2, ctp).raster == direct.raster
    with pytest.raises(InvalidInputError):
        StarfmFuser(method="starfm").fit(p1, p2)
