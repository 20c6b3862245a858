import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import shapley_oracle
from smup.exceptions import InvalidInputError, RefusalError
from smup.gbdt import Ensemble, FeatureTable, RegressionTree, TrainConfig, predict, train
from smup.shap import (
    expected_value,
    shap_summary,
    shapley_bruteforce,
    summary_to_dict,
    tree_shap,
    tree_shap_many,
)


def random_model(seed, d=3, depth=3, rounds=4, missing=False, subsample=0.8):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(120, d))
    y = np.sin(X[:, 0]) + X[:, 1 % d] * X[:, 2 % d] + rng.normal(scale=0.1, size=120)
    if missing:
        X[rng.random(X.shape) < 0.1] = np.nan
        X[:, 0] = np.where(np.isnan(X).all(axis=1), 0.0, X[:, 0])
    cfg = TrainConfig(n_rounds=rounds, max_depth=depth, learning_rate=0.5, subsample=subsample, seed=seed)
    return train(FeatureTable(X, tuple(f"f{i}" for i in range(d))), y, cfg), X


def test_constant_model():
    m = Ensemble(0.7, 0.1, ("a", "b"))
    s = tree_shap(m, [[1.0, 2.0]])
    assert s.phi.tolist() == [0.0, 0.0]
    assert s.base == 0.7


def test_stump_attribution():
    tree = RegressionTree.from_nodes(
        [
            {"id": 0, "feature": 1, "threshold": 0.5, "left": 1, "right": 2, "cover": 4.0},
            {"id": 1, "leaf": -1.0, "cover": 3.0},
            {"id": 2, "leaf": 3.0, "cover": 1.0},
        ]
    )
    m = Ensemble(0.0, 1.0, ("a", "b", "c"), [tree])
    # base = (3 * -1 + 1 * 3) / 4 = 0
    for row, pred in [([9.0, 1.0, 9.0], 3.0), ([9.0, 0.0, 9.0], -1.0)]:
        s = tree_shap(m, [row])
        assert s.base == 0.0
        np.testing.assert_allclose(s.phi, [0.0, pred, 0.0], atol=1e-15)
        np.testing.assert_allclose(shapley_bruteforce(m, [row]).phi, [0.0, pred, 0.0], atol=1e-15)


@pytest.mark.parametrize("seed", range(6))
def test_tree_shap_matches_independent_oracle(seed):
    m, X = random_model(seed, missing=seed % 2 == 1)
    doc = m.to_dict()
    for row in X[:4]:
        phi, base = shapley_oracle(doc, row.tolist())
        s = tree_shap(m, row[None, :])
        np.testing.assert_allclose(s.phi, phi, atol=1e-9)
        assert s.base == pytest.approx(base, abs=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_bruteforce_matches_independent_oracle(seed):
    m, X = random_model(seed + 10, d=4)
    doc = m.to_dict()
    row = X[0]
    np.testing.assert_allclose(shapley_bruteforce(m, row[None, :]).phi, shapley_oracle(doc, row.tolist())[0], atol=1e-9)


def test_local_accuracy():
    m, X = random_model(3, d=5, depth=4, rounds=10)
    phi, base = tree_shap_many(m, X)
    np.testing.assert_allclose(base + phi.sum(axis=1), predict(m, X), atol=1e-9)


def test_dummy_feature_gets_zero():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(100, 3))
    y = X[:, 0] + X[:, 2]
    X[:, 1] = 1.0  # constant, never split on
    m = train(FeatureTable(X, ("a", "b", "c")), y, TrainConfig(n_rounds=5, max_depth=2))
    phi, _ = tree_shap_many(m, X[:10])
    assert np.all(phi[:, 1] == 0.0)


def test_additivity_over_trees():
    m, X = random_model(5, rounds=6)
    half = [Ensemble(0.0, m.eta, m.feature_names, m.trees[:3]), Ensemble(0.0, m.eta, m.feature_names, m.trees[3:])]
    full = tree_shap(m, X[:1]).phi
    parts = sum(tree_shap(h, X[:1]).phi for h in half)
    np.testing.assert_allclose(full, parts, atol=1e-12)


def test_symmetric_duplicate_features():
    def t(f):
        return RegressionTree.from_nodes(
            [
                {"id": 0, "feature": f, "threshold": 0.0, "left": 1, "right": 2, "cover": 10.0},
                {"id": 1, "leaf": -1.0, "cover": 6.0},
                {"id": 2, "leaf": 2.0, "cover": 4.0},
            ]
        )

    def joint(a, b):
        return RegressionTree.from_nodes(
            [
                {"id": 0, "feature": a, "threshold": 0.0, "left": 1, "right": 2, "cover": 10.0},
                {"id": 1, "leaf": 0.5, "cover": 6.0},
                {"id": 2, "feature": b, "threshold": 0.0, "left": 3, "right": 4, "cover": 4.0},
                {"id": 3, "leaf": -3.0, "cover": 0.5},
                {"id": 4, "leaf": 1.0, "cover": 3.5},
            ]
        )

    # the game is symmetric only if every tree using one copy has a mirror using the other
    m = Ensemble(0.0, 1.0, ("x", "x_copy", "z"), [t(0), t(1), joint(0, 1), joint(1, 0)])
    for v in (-1.0, 1.0):
        s = tree_shap(m, [[v, v, 0.0]])
        assert abs(s.phi[0] - s.phi[1]) < 1e-9


def test_missing_value_follows_default_direction():
    m, X = random_model(7, missing=True)
    rows = X[np.isnan(X).any(axis=1)][:5]
    phi, base = tree_shap_many(m, rows)
    np.testing.assert_allclose(base + phi.sum(axis=1), predict(m, rows), atol=1e-9)


def test_expected_value_is_cover_weighted_mean():
    m, X = random_model(8, rounds=1, depth=2, subsample=1.0)
    m1 = Ensemble(m.base_score, 1.0, m.feature_names, m.trees)
    # with full-sample training and h = 1, leaf covers are row counts
    assert expected_value(m1) == pytest.approx(m.base_score + np.mean(m.trees[0].predict(X)), abs=1e-12)


def test_missing_cover_rejected():
    tree = RegressionTree.from_nodes(
        [
            {"id": 0, "feature": 0, "threshold": 0.5, "left": 1, "right": 2},
            {"id": 1, "leaf": -1.0},
            {"id": 2, "leaf": 1.0},
        ]
    )
    with pytest.raises(InvalidInputError):
        tree_shap(Ensemble(0.0, 1.0, ("a",), [tree]), [[0.0]])


def test_bruteforce_refuses_wide_models():
    m = Ensemble(0.0, 1.0, tuple(f"f{i}" for i in range(13)))
    with pytest.raises(RefusalError):
        shapley_bruteforce(m, np.zeros((1, 13)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 100_000))
def test_tree_shap_equals_bruteforce_property(seed):
    m, X = random_model(seed, d=int(seed % 4) + 2, depth=3, rounds=3)
    row = X[seed % X.shape[0]][None, :]
    np.testing.assert_allclose(tree_shap(m, row).phi, shapley_bruteforce(m, row).phi, atol=1e-9)


# -- summary -------------------------------------------------------------------


def test_summary_single_row():
    ranking = [e.feature for e in shap_summary([[0.2, 0.1]], ["f1", "f2"])]
    assert ranking == ["f1", "f2"]


def test_summary_all_zero_ties_by_name():
    ranking = [e.feature for e in shap_summary([[0.0, 0.0, 0.0]], ["ndvi", "clay", "lst"])]
    assert ranking == ["clay", "lst", "ndvi"]


def test_summary_only_used_feature_first():
    tree = RegressionTree.from_nodes(
        [
            {"id": 0, "feature": 3, "threshold": 0.0, "left": 1, "right": 2, "cover": 2.0},
            {"id": 1, "leaf": -1.0, "cover": 1.0},
            {"id": 2, "leaf": 1.0, "cover": 1.0},
        ]
    )
    names = ("a", "b", "c", "d", "e")
    m = Ensemble(0.0, 1.0, names, [tree])
    X = np.random.default_rng(0).normal(size=(20, 5))
    phi, _ = tree_shap_many(m, X)
    summary = shap_summary(phi, names)
    assert summary[0].feature == "d" and summary[0].mean_abs > 0
    assert all(e.mean_abs == 0.0 for e in summary[1:])
    doc = summary_to_dict(summary)
    assert doc["ranking"][0] == {"rank": 1, "feature": "d", "mean_abs": summary[0].mean_abs, "phi": phi[:, 3].tolist()}


def test_summary_validation():
    with pytest.raises(InvalidInputError):
        shap_summary([], ["a"])
    with pytest.raises(InvalidInputError):
        shap_summary([[1.0, 2.0]], ["a"])
