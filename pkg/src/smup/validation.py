"""Evaluation: error metrics, Taylor statistics, density binning and site splits.

Standard deviations use the sample convention (denominator ``n - 1``)
throughout.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from smup.exceptions import InvalidInputError, RefusalError

FOUR_FOLD = "four-fold"
CROSS_CLUSTER = "cross-cluster"

# (west, east, south, north); membership is closed on the low edges, open on the high ones
CLUSTER_BOXES = {
    "A": (146.06, 146.16, -34.77, -34.62),
    "B": (146.25, 146.35, -35.02, -34.92),
}


@dataclass(frozen=True)
class MetricsReport:
    n: int
    bias: float
    rmse: float
    ubrmse: float
    r: float | None

    @property
    def r_defined(self) -> bool:
        return self.r is not None

    def to_dict(self) -> dict:
        return {"n": self.n, "bias": self.bias, "rmse": self.rmse, "ubrmse": self.ubrmse, "r": self.r}


@dataclass(frozen=True)
class TaylorStats:
    sigma_hat: float
    r: float
    crmse_hat: float

    def to_dict(self) -> dict:
        return {"sigma_hat": self.sigma_hat, "r": self.r, "crmse_hat": self.crmse_hat}


def _pair(pred, obs):
    p = np.asarray(pred, dtype=np.float64).ravel()
    o = np.asarray(obs, dtype=np.float64).ravel()
    if p.size != o.size:
        raise InvalidInputError(f"pred and obs lengths differ: {p.size} vs {o.size}")
    if not (np.isfinite(p).all() and np.isfinite(o).all()):
        raise InvalidInputError("pred/obs must be finite; drop nodata pairs first")
    return p, o


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    if a.size < 2:
        return None
    da = a - a.mean()
    db = b - b.mean()
    saa = float(np.dot(da, da))
    sbb = float(np.dot(db, db))
    if saa == 0.0 or sbb == 0.0:
        return None
    return float(np.clip(np.dot(da, db) / math.sqrt(saa * sbb), -1.0, 1.0))


def metrics(pred, obs) -> MetricsReport:
    p, o = _pair(pred, obs)
    if p.size == 0:
        raise RefusalError("metrics need at least one pair")
    err = p - o
    bias = float(np.mean(err))
    mse = float(np.mean(err * err))
    rmse = math.sqrt(mse)
    ubrmse = math.sqrt(max(mse - bias * bias, 0.0))
    return MetricsReport(n=int(p.size), bias=bias, rmse=rmse, ubrmse=ubrmse, r=pearson(p, o))


def taylor_stats(pred, obs) -> TaylorStats:
    """Normalised standard deviation, correlation and centered RMS difference.

    A constant prediction has no defined correlation; ``r`` is reported as 0
    so the point still satisfies the law-of-cosines identity.
    """
    p, o = _pair(pred, obs)
    if p.size < 2:
        raise RefusalError("taylor_stats needs at least two pairs")
    sd_obs = float(np.std(o, ddof=1))
    if sd_obs == 0.0:
        raise RefusalError("observations have zero standard deviation")
    sd_pred = float(np.std(p, ddof=1))
    r = pearson(p, o)
    r = 0.0 if r is None else r
    centered = (p - p.mean()) - (o - o.mean())
    crmse = math.sqrt(float(np.dot(centered, centered)) / (p.size - 1))
    return TaylorStats(sigma_hat=sd_pred / sd_obs, r=r, crmse_hat=crmse / sd_obs)


def density_bins(x, y, nbins: int = 100) -> np.ndarray:
    """Per-point density (bin count / max bin count) on a joint 2-D histogram."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size == 0:
        raise InvalidInputError("density_bins needs equal, non-empty x and y")
    if nbins < 1:
        raise InvalidInputError("nbins must be >= 1")
    lo = min(x.min(), y.min())
    hi = max(x.max(), y.max())
    span = hi - lo
    if span <= 0:
        return np.ones(x.size)

    def index(v):
        return np.clip(np.floor((v - lo) / span * nbins).astype(np.intp), 0, nbins - 1)

    flat = index(x) * nbins + index(y)
    counts = np.bincount(flat, minlength=nbins * nbins)
    return counts[flat] / counts.max()


# -- splits -------------------------------------------------------------------


@dataclass
class SplitPlan:
    mode: str
    assignment: dict
    k: int
    fold_names: list
    excluded: list = field(default_factory=list)

    def sites_in(self, fold: int) -> list:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "fold_names": self.fold_names,
            "assignment": dict(sorted(self.assignment.items())),
            "excluded": self.excluded,
        }


def in_box(lon, lat, box) -> bool:
    west, east, south, north = box
    return west <= lon < east and south <= lat < north


def cluster_of(lon, lat):
    for name, box in CLUSTER_BOXES.items():
        if in_box(lon, lat, box):
            return name
    return None


def _site_locations(sites) -> dict:
    locs = {}
    for s in sites:
        locs.setdefault(s.site_id, (s.lon, s.lat))
    return locs


def make_split(sites, mode: str = FOUR_FOLD, k: int = 4, seed: int = 42) -> SplitPlan:
    """Assign whole sites to folds.

    ``four-fold``: distinct site ids are sorted, shuffled with a Philox
    generator seeded by ``seed`` and dealt round-robin into ``k`` folds.
    ``cross-cluster``: fold 0 is cluster A, fold 1 cluster B; other sites
    are excluded.
    """
    locs = _site_locations(sites)
    ids = sorted(locs)
    if mode == FOUR_FOLD:
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        if len(ids) < k:
            raise RefusalError(f"need at least {k} distinct sites, got {len(ids)}")
        rng = np.random.Generator(np.random.Philox(seed))
        order = rng.permutation(len(ids))
        assignment = {ids[j]: pos % k for pos, j in enumerate(order)}
        return SplitPlan(FOUR_FOLD, assignment, k, [f"fold{i}" for i in range(k)])
    if mode == CROSS_CLUSTER:
        names = list(CLUSTER_BOXES)
        assignment, excluded = {}, []
        for sid in ids:
            c = cluster_of(*locs[sid])
            if c is None:
                excluded.append(sid)
            else:
                assignment[sid] = names.index(c)
        for i, name in enumerate(names):
            if i not in assignment.values():
                raise RefusalError(f"cluster {name} contains no sites")
        return SplitPlan(CROSS_CLUSTER, assignment, len(names), names, excluded)
    raise InvalidInputError(f"unknown split mode {mode!r}")


# -- cross-validation ---------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    name: str
    train_sites: list
    test_sites: list
    report: MetricsReport
    taylor: TaylorStats | None
    per_site: list
    obs: np.ndarray
    pred: np.ndarray

    def to_dict(self) -> dict:
        d = {"fold": self.fold, "name": self.name}
        d.update(self.report.to_dict())
        d["train_sites"] = self.train_sites
        d["test_sites"] = self.test_sites
        d["per_site"] = self.per_site
        d["taylor"] = None if self.taylor is None else self.taylor.to_dict()
        return d


@dataclass
class CVReport:
    mode: str
    folds: list
    skipped: list
    pooled: MetricsReport
    pooled_taylor: TaylorStats | None

    def to_dict(self, include_pairs: bool = True) -> dict:
        d = {
            "mode": self.mode,
            "folds": [f.to_dict() for f in self.folds],
            "skipped": self.skipped,
            "pooled": dict(self.pooled.to_dict(), taylor=None if self.pooled_taylor is None else self.pooled_taylor.to_dict()),
        }
        if include_pairs:
            d["pairs"] = {
                "obs": [float(v) for f in self.folds for v in f.obs],
                "pred": [float(v) for f in self.folds for v in f.pred],
            }
        return d


def _safe_taylor(pred, obs):
    try:
        return taylor_stats(pred, obs)
    except RefusalError:
        return None


def _site_entry(site_id, pred, obs) -> dict:
    d = {"site_id": site_id}
    d.update(metrics(pred, obs).to_dict())
    t = _safe_taylor(pred, obs)
    d["taylor"] = None if t is None else t.to_dict()
    return d


def cross_validate_matrix(matrix, plan: SplitPlan, train_cfg=None, threads: int = 1, permute_seed=None) -> CVReport:
    """Train on the complement of each fold and score the held-out sites.

    ``permute_seed`` shuffles the labels across rows first (a permutation
    control whose correlations should vanish).
    """
    from smup.gbdt import FeatureTable, TrainConfig, predict, train

    cfg = train_cfg or TrainConfig()
    labels = np.asarray(matrix.labels, dtype=np.float64)
    if permute_seed is not None:
        labels = labels[np.random.Generator(np.random.Philox(permute_seed)).permutation(labels.size)]
    site_ids = np.asarray(matrix.site_ids, dtype=object)
    fold_of = np.array([plan.assignment.get(s, -1) for s in site_ids])

    jobs, skipped = [], []
    for f in range(plan.k):
        test = fold_of == f
        trainset = (fold_of >= 0) & ~test
        if not trainset.any():
            raise RefusalError(f"fold {plan.fold_names[f]} leaves an empty training set")
        if not test.any():
            skipped.append({"fold": f, "name": plan.fold_names[f], "reason": "no test rows"})
            continue
        jobs.append((f, trainset, test))

    def run(job):
        f, trainset, test = job
        model = train(FeatureTable(matrix.table.values[trainset], matrix.table.feature_names), labels[trainset], cfg)
        pred = predict(model, matrix.table.values[test])
        obs = labels[test]
        sids = site_ids[test]
        per_site = [_site_entry(s, pred[sids == s], obs[sids == s]) for s in sorted(set(sids))]
        return FoldResult(
            fold=f,
            name=plan.fold_names[f],
            train_sites=sorted(set(site_ids[trainset])),
            test_sites=sorted(set(sids)),
            report=metrics(pred, obs),
            taylor=_safe_taylor(pred, obs),
            per_site=per_site,
            obs=obs,
            pred=pred,
        )

    threads = max(int(threads or 1), 1)
    if threads == 1:
        folds = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            folds = list(pool.map(run, jobs))
    if not folds:
        raise RefusalError("no fold has test rows")
    all_obs = np.concatenate([f.obs for f in folds])
    all_pred = np.concatenate([f.pred for f in folds])
    return CVReport(
        mode=plan.mode,
        folds=folds,
        skipped=skipped,
        pooled=metrics(all_pred, all_obs),
        pooled_taylor=_safe_taylor(all_pred, all_obs),
    )


def cross_validate(stack, sites, plan: SplitPlan, train_cfg=None, threads: int = 1, permute_seed=None) -> CVReport:
    from smup.pipeline import build_training_table

    matrix = build_training_table(stack, sites)
    return cross_validate_matrix(matrix, plan, train_cfg, threads=threads, permute_seed=permute_seed)
