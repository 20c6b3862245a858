"""Exit criteria. Each test prints one PASS/FAIL line and records it for the summary."""

import datetime as dt
import math
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import metrics_oracle, shapley_oracle, taylor_oracle
from smup.fusion import FusionParams, ScenePair, estarfm_fuse, fuse_arrays, ub_estarfm_fuse
from smup.gbdt import FeatureTable, TrainConfig, load_model, predict, save_model, train
from smup.grid import GeoGrid, Raster, TimedRaster, read_raster, write_raster
from smup.pipeline import read_sites_csv, run_experiment
from smup.plots import density_svg, taylor_svg, violin_svg
from smup.shap import shap_summary, shapley_bruteforce, summary_to_dict, tree_shap_many
from smup.synthetic import write_experiment
from smup.validation import metrics, taylor_stats

pytestmark = pytest.mark.acceptance

D1, D2, DP = dt.date(2018, 1, 5), dt.date(2018, 1, 21), dt.date(2018, 1, 13)


def table(X):
    X = np.asarray(X, dtype=float)
    return FeatureTable(X, tuple(f"f{i}" for i in range(X.shape[1])))


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def smooth(rng, shape, waves=3):
    y, x = np.mgrid[0 : shape[0], 0 : shape[1]] / max(shape)
    out = np.zeros(shape)
    for _ in range(waves):
        kx, ky, ph = rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(0, 6.3)
        out += np.sin(2 * np.pi * (kx * x + ky * y) + ph)
    return out


def pairs(f1, f2, c1, c2, cp):
    grid = GeoGrid(ncols=f1.shape[1], nrows=f1.shape[0], xll=146.0, yll=-35.0, cellsize=0.001)
    p1 = ScenePair(TimedRaster(Raster(grid, f1), D1), TimedRaster(Raster(grid, c1), D1))
    p2 = ScenePair(TimedRaster(Raster(grid, f2), D2), TimedRaster(Raster(grid, c2), D2))
    return p1, p2, TimedRaster(Raster(grid, cp), DP)


# -- fusion ----------------------------------------------------------------------


def test_criterion_1_fusion_identity():
    params = FusionParams(window=51)
    rng = np.random.default_rng(100)
    warm = rng.uniform(0.1, 0.5, (8, 8))
    for fuse in (estarfm_fuse, ub_estarfm_fuse):
        fuse(*pairs(warm, warm, warm, warm, warm), params=params)  # compile outside the clock
    worst, t = 0.0, time.perf_counter()
    for _ in range(10):
        f = 0.3 + 0.05 * smooth(rng, (64, 64)) + 0.01 * rng.standard_normal((64, 64))
        c = 0.25 + 0.04 * smooth(rng, (64, 64))
        ref = Raster(pairs(f, f, c, c, c)[0].fine.raster.grid, f).values
        for fuse in (estarfm_fuse, ub_estarfm_fuse):
            out = fuse(*pairs(f, f, c, c, c), params=params)
            worst = max(worst, float(np.max(np.abs(out.raster.values - ref))))
    elapsed = time.perf_counter() - t
    report(1, worst < 1e-6 and elapsed < 5.0, f"identity max|d|={worst:.2e} (<1e-6), {elapsed:.2f}s (<5s)")


def test_criterion_2_fusion_additive_shift():
    rng = np.random.default_rng(200)
    worst = 0.0
    for delta in (0.037, -0.05, 0.12):
        f1 = 0.3 + 0.05 * smooth(rng, (24, 22))
        c1 = np.full(f1.shape, 0.25)
        for fuse in (estarfm_fuse, ub_estarfm_fuse):
            out = fuse(*pairs(f1, f1, c1, c1, c1 + delta), params=FusionParams(window=9))
            expected = Raster(out.raster.grid, f1 + delta).values
            worst = max(worst, float(np.max(np.abs(out.raster.values - expected))))
    report(2, worst < 1e-6, f"delta-shift max|d|={worst:.2e} (<1e-6)")


def test_criterion_3_ub_unbiasedness():
    rng = np.random.default_rng(300)
    worst = 0.0
    for _ in range(20):
        shape = (int(rng.integers(20, 40)), int(rng.integers(20, 40)))
        w = int(rng.choice([3, 5, 7, 9]))
        c1 = 0.3 + 0.05 * smooth(rng, shape)
        c2 = c1 + 0.02 * smooth(rng, shape) + 0.01
        cp = c1 + 0.015 * smooth(rng, shape) + 0.005
        f1 = 1.2 * c1 + 0.03 + 0.01 * smooth(rng, shape, 5)
        f2 = 1.2 * c2 + 0.03 + 0.01 * smooth(rng, shape, 5)
        out, t1, base = fuse_arrays(f1, f2, c1, c2, cp, params=FusionParams(window=w), unbiased=True)
        target = t1 * (cp - c1) + (1 - t1) * (cp - c2)
        for r0 in range(0, shape[0], w):
            for c0 in range(0, shape[1], w):
                blk = np.s_[r0 : r0 + w, c0 : c0 + w]
                worst = max(worst, abs(float(np.mean(out[blk] - base[blk]) - np.mean(target[blk]))))
    report(3, worst < 1e-6, f"window-mean increment gap max={worst:.2e} (<1e-6) over 20 trials")


# -- metrics ---------------------------------------------------------------------


def test_criterion_4_metric_oracle():
    rng = np.random.default_rng(400)
    worst_oracle = worst_identity = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 200))
        o = rng.uniform(0.0, 0.5, n)
        p = o + rng.normal(rng.uniform(-0.1, 0.1), rng.uniform(0.01, 0.2), n)
        m = metrics(p, o)
        ref = metrics_oracle(p.tolist(), o.tolist())
        worst_oracle = max(worst_oracle, *(abs(a - b) for a, b in zip((m.bias, m.rmse, m.ubrmse, m.r), ref)))
        worst_identity = max(worst_identity, abs(m.ubrmse**2 + m.bias**2 - m.rmse**2))
    ok = worst_oracle < 1e-12 and worst_identity < 1e-9
    report(4, ok, f"oracle gap {worst_oracle:.1e} (<1e-12), identity gap {worst_identity:.1e} (<1e-9)")


def test_criterion_5_taylor_identity():
    rng = np.random.default_rng(500)
    worst = worst_oracle = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 200))
        o = rng.normal(size=n)
        p = rng.uniform(-1, 1) * o + rng.normal(scale=rng.uniform(0.1, 2), size=n)
        t = taylor_stats(p, o)
        worst = max(worst, abs(t.crmse_hat**2 - (t.sigma_hat**2 + 1 - 2 * t.sigma_hat * t.r)))
        worst_oracle = max(worst_oracle, *(abs(a - b) for a, b in zip((t.sigma_hat, t.r, t.crmse_hat), taylor_oracle(p.tolist(), o.tolist()))))
    report(5, worst < 1e-9, f"Taylor identity gap {worst:.1e} (<1e-9), oracle gap {worst_oracle:.1e}")


# -- boosted trees ---------------------------------------------------------------


def test_criterion_6_gbdt_hand_case_and_monotone_loss():
    hand = TrainConfig(n_rounds=1, max_depth=1, reg_lambda=0.0, learning_rate=1.0, base_score=2.0)
    t = train(table([[0.0], [1.0]]), [0.0, 4.0], hand).trees[0]
    wl, wr = t.value[t.left[0]], t.value[t.right[0]]
    rng = np.random.default_rng(600)
    rises = 0
    for _ in range(5):
        X = rng.normal(size=(300, 5))
        y = np.sin(X[:, 0]) + X[:, 1] * X[:, 2] + rng.normal(scale=0.2, size=300)
        hist = []
        train(table(X), y, TrainConfig(n_rounds=50, max_depth=3), history=hist)
        rises += sum(b > a for a, b in zip(hist, hist[1:]))
    ok = wl == -2.0 and wr == 2.0 and rises == 0
    report(6, ok, f"stump w_L={wl}, w_R={wr}; loss increases over 5x50 rounds: {rises}")


def test_criterion_7_gbdt_capacity():
    rng = np.random.default_rng(700)
    x = rng.uniform(0, 10, 2000)
    y = 1.5 * (x > 3.0) - 2.0 * (x > 7.0) + 0.3 * x
    t = time.perf_counter()
    model = train(table(x[:, None]), y, TrainConfig(n_rounds=200, max_depth=6, learning_rate=0.3))
    elapsed = time.perf_counter() - t
    resid = y - predict(model, x[:, None])
    r2 = 1 - resid @ resid / np.sum((y - y.mean()) ** 2)
    report(7, r2 >= 0.999 and elapsed < 10.0, f"training R2={r2:.6f} (>=0.999), {elapsed:.2f}s (<10s)")


# -- SHAP ------------------------------------------------------------------------


def random_ensemble(rng, d, rounds=4, depth=3, n=150):
    X = rng.normal(size=(n, d))
    X[rng.random(X.shape) < 0.05] = np.nan
    X[:, 0] = np.where(np.isnan(X).all(axis=1), 0.0, X[:, 0])
    w = rng.normal(size=d)
    y = np.tanh(np.nan_to_num(X) @ w) + np.nan_to_num(X[:, 0]) * np.nan_to_num(X[:, d - 1])
    cfg = TrainConfig(n_rounds=rounds, max_depth=depth, learning_rate=0.5, subsample=0.8, colsample=0.9, seed=int(rng.integers(1 << 30)))
    return train(table(X), y, cfg), X


def test_criterion_8_shap_axioms():
    rng = np.random.default_rng(800)
    model, _ = random_ensemble(rng, 8, rounds=30, depth=5, n=1000)
    X = rng.normal(size=(1000, 8))
    X[rng.random(X.shape) < 0.05] = np.nan
    phi, base = tree_shap_many(model, X)
    local = float(np.max(np.abs(base + phi.sum(axis=1) - predict(model, X))))
    brute = oracle = 0.0
    for _ in range(50):
        d = int(rng.integers(2, 11))
        m, Xm = random_ensemble(rng, d)
        row = Xm[int(rng.integers(len(Xm)))][None, :]
        p, _ = tree_shap_many(m, row)
        brute = max(brute, float(np.max(np.abs(p[0] - shapley_bruteforce(m, row).phi))))
        if d <= 6:
            oracle = max(oracle, float(np.max(np.abs(p[0] - shapley_oracle(m.to_dict(), row[0].tolist())[0]))))
    ok = local < 1e-6 and brute < 1e-6
    report(8, ok, f"local accuracy gap {local:.1e} on 1000 rows, tree_shap vs brute force {brute:.1e} on 50 ensembles (<1e-6), vs oracle {oracle:.1e}")


# -- synthetic end to end ----------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    cfg = write_experiment(root / "a", seed=42, threads=1)
    t = time.perf_counter()
    first = run_experiment(cfg)
    elapsed = time.perf_counter() - t
    again = run_experiment(write_experiment(root / "b", seed=42, threads=1))
    wide = run_experiment(write_experiment(root / "c", seed=42, threads=8))
    return first, elapsed, again, wide


def test_criterion_9_synthetic_end_to_end(synthetic_runs):
    res, elapsed, _, _ = synthetic_runs
    sites = read_sites_csv(res.output_dir.parent / "sites.csv")
    n_sites = len({s.site_id for s in sites})
    ff, cc, ctrl = res.reports["four-fold"], res.reports["cross-cluster"], res.reports["control"]
    folds = [f.report.r for f in ff.folds]
    cross = [f.report.r for f in cc.folds]
    ok = (
        n_sites == 28
        and len(folds) == 4
        and ff.pooled.r >= 0.9
        and min(folds) >= 0.8
        and len(cross) == 2
        and min(cross) >= 0.75
        and abs(ctrl.pooled.r) < 0.2
        and elapsed < 120
    )
    detail = (
        f"{n_sites} sites; four-fold pooled r={ff.pooled.r:.3f} (>=0.9), folds "
        f"{'/'.join(f'{r:.3f}' for r in folds)} (>=0.8); cross-cluster {'/'.join(f'{r:.3f}' for r in cross)} "
        f"(>=0.75); control |r|={abs(ctrl.pooled.r):.3f} (<0.2); {elapsed:.1f}s (<120s)"
    )
    report(9, ok, detail)


def test_criterion_10_determinism(synthetic_runs):
    first, _, again, wide = synthetic_runs
    names = [n for n in first.outputs if n.endswith(".json")]
    rerun = all(first.outputs[n].read_bytes() == again.outputs[n].read_bytes() for n in names)
    threads = all(first.outputs[n].read_bytes() == wide.outputs[n].read_bytes() for n in names)
    report(10, rerun and threads and "model.json" in names, f"{len(names)} model/metrics JSON files: rerun identical={rerun}, threads 1 vs 8 identical={threads}")


# -- formats and plots -------------------------------------------------------------


def test_criterion_11_round_trips(tmp_path):
    rng = np.random.default_rng(1100)
    grid = GeoGrid(ncols=37, nrows=23, xll=146.1, yll=-35.2, cellsize=0.001)
    vals = rng.normal(size=grid.shape).astype(np.float32)
    vals[3, 4] = np.nan
    r = Raster(grid, vals)
    back = read_raster(write_raster(r, tmp_path / "r"))
    raster_ok = back.grid == grid and back.values.tobytes() == r.values.tobytes()

    model, X = random_ensemble(rng, 5, rounds=10, depth=4)
    save_model(model, tmp_path / "m.json")
    loaded = load_model(tmp_path / "m.json")
    model_ok = loaded.to_json() == model.to_json() and predict(loaded, X).tobytes() == predict(model, X).tobytes()

    lines = ["site_id,lon,lat,date,sm"]
    base = dt.date(2000, 1, 1)
    for i in range(10_000):
        lines.append(f"S{i % 28:02d},146.{i % 97:02d},-34.{i % 89:02d},{(base + dt.timedelta(days=i // 28)).isoformat()},0.{i % 1000:03d}")
    (tmp_path / "sites.csv").write_text("\n".join(lines) + "\n")
    t = time.perf_counter()
    sites = read_sites_csv(tmp_path / "sites.csv")
    elapsed = time.perf_counter() - t
    ok = raster_ok and model_ok and len(sites) == 10_000 and elapsed < 1.0
    report(11, ok, f"raster lossless={raster_ok}, model lossless={model_ok}, 10000-row CSV in {elapsed:.3f}s (<1s)")


def test_criterion_12_plots():
    rng = np.random.default_rng(1200)
    svg = taylor_svg([{"name": "perfect", "points": [{"sigma_hat": 1.0, "r": 1.0}]}, {"name": "other", "points": [{"sigma_hat": 0.8, "r": 0.6}]}])
    root = ET.fromstring(svg)
    marker = next(e for e in root.iter() if e.get("class") == "marker" and e.get("data-series") == "perfect")
    radius, angle = float(marker.get("data-radius")), float(marker.get("data-angle"))
    obs = rng.uniform(0, 0.5, 300)
    phi = rng.normal(size=(50, 3))
    docs = [
        svg,
        density_svg(obs, obs + rng.normal(scale=0.05, size=300)),
        violin_svg(summary_to_dict(shap_summary(list(phi), ["ndvi", "lst", "clay"]))),
    ]
    well_formed = 0
    for doc in docs:
        try:
            well_formed += ET.fromstring(doc).tag == "{http://www.w3.org/2000/svg}svg"
        except ET.ParseError:
            pass
    ok = well_formed == 3 and radius == 1.0 and angle == 0.0 and math.isfinite(radius)
    report(12, ok, f"{well_formed}/3 SVGs well-formed; perfect point radius={radius}, angle={angle}")
