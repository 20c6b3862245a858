"""Path-dependent TreeSHAP for :class:`smup.gbdt.Ensemble` models.

The conditional expectation of a tree given a feature subset ``S`` follows
the row through splits on features in ``S`` and averages both children by
training cover otherwise. :func:`tree_shap` computes exact Shapley values of
that set function in polynomial time; :func:`shapley_bruteforce` enumerates
all subsets and serves as the oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from smup.exceptions import InvalidInputError, RefusalError
from smup.gbdt import Ensemble, RegressionTree, _align

MAX_BRUTEFORCE_FEATURES = 12


@dataclass(frozen=True)
class ShapRow:
    phi: np.ndarray
    base: float

    @property
    def prediction(self) -> float:
        return self.base + float(np.sum(self.phi))


@dataclass(frozen=True)
class SummaryEntry:
    feature: str
    mean_abs: float
    phi: np.ndarray


def _check_cover(model: Ensemble):
    for i, tree in enumerate(model.trees):
        if not tree.has_cover:
            raise InvalidInputError(f"tree {i} has no cover metadata; TreeSHAP needs training covers")


def _expected_value(tree: RegressionTree) -> float:
    leaves = tree.feature < 0
    return float(np.sum(tree.value[leaves] * tree.cover[leaves]) / tree.cover[0])


def expected_value(model: Ensemble) -> float:
    """Cover-weighted mean model output: the attribution baseline."""
    _check_cover(model)
    return model.base_score + model.eta * sum(_expected_value(t) for t in model.trees)


def _row(model, row) -> np.ndarray:
    X = _align(model, np.atleast_2d(row) if not hasattr(row, "columns") else row)
    if X.shape[0] != 1:
        raise InvalidInputError("expected a single row")
    return X[0]


def _hot_child(tree, node, x):
    v = x[tree.feature[node]]
    if np.isnan(v):
        go_left = tree.default_left[node]
    else:
        go_left = v < tree.threshold[node]
    return (tree.left[node], tree.right[node]) if go_left else (tree.right[node], tree.left[node])


# Path entries are [feature, zero_fraction, one_fraction, weight].


def _extend(path, pz, po, pi):
    path = [list(e) for e in path]
    depth = len(path)
    path.append([pi, pz, po, 1.0 if depth == 0 else 0.0])
    for i in range(depth - 1, -1, -1):
        path[i + 1][3] += po * path[i][3] * (i + 1) / (depth + 1)
        path[i][3] = pz * path[i][3] * (depth - i) / (depth + 1)
    return path


def _unwind(path, i):
    path = [list(e) for e in path]
    depth = len(path) - 1
    _, z, o, _ = path[i]
    n = path[depth][3]
    for j in range(depth - 1, -1, -1):
        if o != 0:
            t = path[j][3]
            path[j][3] = n * (depth + 1) / ((j + 1) * o)
            n = t - path[j][3] * z * (depth - j) / (depth + 1)
        else:
            path[j][3] = path[j][3] * (depth + 1) / (z * (depth - j))
    for j in range(i, depth):
        path[j][0], path[j][1], path[j][2] = path[j + 1][0], path[j + 1][1], path[j + 1][2]
    path.pop()
    return path


def _unwound_sum(path, i):
    return sum(e[3] for e in _unwind(path, i))


def _tree_shap(tree: RegressionTree, x: np.ndarray, phi: np.ndarray, scale: float):
    def recurse(node, path, pz, po, pi):
        path = _extend(path, pz, po, pi)
        if tree.feature[node] < 0:
            for i in range(1, len(path)):
                w = _unwound_sum(path, i)
                feat, z, o, _ = path[i]
                phi[feat] += scale * w * (o - z) * tree.value[node]
            return
        hot, cold = _hot_child(tree, node, x)
        feat = tree.feature[node]
        iz = io = 1.0
        for k in range(1, len(path)):
            if path[k][0] == feat:
                iz, io = path[k][1], path[k][2]
                path = _unwind(path, k)
                break
        cover = tree.cover[node]
        recurse(hot, path, iz * tree.cover[hot] / cover, io, feat)
        recurse(cold, path, iz * tree.cover[cold] / cover, 0.0, feat)

    recurse(0, [], 1.0, 1.0, -1)


def tree_shap(model: Ensemble, row) -> ShapRow:
    """Exact path-dependent Shapley values for one row."""
    _check_cover(model)
    x = _row(model, row)
    phi = np.zeros(len(model.feature_names))
    for tree in model.trees:
        if tree.feature[0] >= 0:
            _tree_shap(tree, x, phi, model.eta)
    return ShapRow(phi=phi, base=expected_value(model))


def tree_shap_many(model: Ensemble, rows) -> tuple[np.ndarray, float]:
    """(n_rows, n_features) attribution matrix and the shared base value."""
    _check_cover(model)
    X = _align(model, rows)
    out = np.zeros((X.shape[0], len(model.feature_names)))
    for r in range(X.shape[0]):
        for tree in model.trees:
            if tree.feature[0] >= 0:
                _tree_shap(tree, X[r], out[r], model.eta)
    return out, expected_value(model)


def _subset_values(tree: RegressionTree, x: np.ndarray, n: int) -> np.ndarray:
    """Conditional expectation for every subset mask ``0 .. 2**n - 1``."""
    masks = np.arange(2**n)

    def rec(node):
        if tree.feature[node] < 0:
            return np.full(masks.size, tree.value[node])
        hot, cold = _hot_child(tree, node, x)
        v_hot = rec(hot)
        v_cold = rec(cold)
        cover = tree.cover[node]
        avg = (tree.cover[hot] * v_hot + tree.cover[cold] * v_cold) / cover
        in_s = (masks >> tree.feature[node]) & 1 == 1
        return np.where(in_s, v_hot, avg)

    return rec(0)


def shapley_bruteforce(model: Ensemble, row) -> ShapRow:
    """Shapley values by enumerating all ``2**n`` feature subsets."""
    n = len(model.feature_names)
    if n > MAX_BRUTEFORCE_FEATURES:
        raise RefusalError(f"brute-force Shapley limited to {MAX_BRUTEFORCE_FEATURES} features, got {n}")
    _check_cover(model)
    x = _row(model, row)
    values = np.full(2**n, model.base_score)
    for tree in model.trees:
        values = values + model.eta * _subset_values(tree, x, n)
    sizes = np.array([bin(m).count("1") for m in range(2**n)])
    weight = np.array([factorial(s) * factorial(n - s - 1) / factorial(n) if s < n else 0.0 for s in range(n + 1)])
    phi = np.zeros(n)
    masks = np.arange(2**n)
    for i in range(n):
        without = masks[(masks >> i) & 1 == 0]
        phi[i] = float(np.sum(weight[sizes[without]] * (values[without | (1 << i)] - values[without])))
    return ShapRow(phi=phi, base=float(values[0]))


def shap_summary(rows, feature_names) -> list[SummaryEntry]:
    """Rank features by mean |phi| (descending, ties by name)."""
    phis = np.array([r.phi if isinstance(r, ShapRow) else np.asarray(r, dtype=np.float64) for r in rows])
    if phis.ndim != 2 or phis.shape[0] == 0:
        raise InvalidInputError("shap_summary needs at least one row")
    names = list(feature_names)
    if phis.shape[1] != len(names):
        raise InvalidInputError("phi width does not match feature names")
    mean_abs = np.mean(np.abs(phis), axis=0)
    order = sorted(range(len(names)), key=lambda j: (-mean_abs[j], names[j]))
    return [SummaryEntry(names[j], float(mean_abs[j]), phis[:, j].copy()) for j in order]


def summary_to_dict(entries: list[SummaryEntry]) -> dict:
    return {
        "ranking": [
            {"rank": k + 1, "feature": e.feature, "mean_abs": e.mean_abs, "phi": [float(v) for v in e.phi]}
            for k, e in enumerate(entries)
        ]
    }
