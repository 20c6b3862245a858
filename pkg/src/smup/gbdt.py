"""Second-order gradient-boosted regression trees for squared-error loss.

Each round computes ``g = pred - y`` and ``h = 1`` per row and grows one tree
by exact greedy search over sorted feature values. A split on ``x < t``
(``t`` the midpoint of consecutive distinct values) is scored with

    gain = 0.5 * [GL^2/(HL+lambda) + GR^2/(HR+lambda) - G^2/(H+lambda)] - gamma

and accepted only when ``gain > 0`` and both children carry at least
``min_child_weight`` hessian. Rows missing the feature are tried on both
sides; the better side becomes the node's default direction (left on ties).
Equal gains resolve to the lowest (feature index, threshold).

Leaves store the raw Newton weight ``-G/(H+lambda)``; the learning rate is
applied at prediction time: ``pred = base_score + eta * sum(tree outputs)``.

Row and column subsampling draw from numpy's ``Philox`` counter-based
generator seeded with ``TrainConfig.seed``: per round, first the row sample
(``round(subsample * n)`` rows without replacement), then the column sample.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from smup._validation import as_1d_finite, as_2d_float, column_names
from smup.exceptions import InvalidInputError, MalformedInputError

log = logging.getLogger(__name__)

MODEL_FORMAT = "smup-gbdt/1"


@dataclass(frozen=True)
class FeatureTable:
    values: np.ndarray
    feature_names: tuple

    def __post_init__(self):
        vals = as_2d_float(self.values, "feature table")
        names = tuple(str(n) for n in self.feature_names)
        if len(set(names)) != len(names):
            raise InvalidInputError("feature names must be unique")
        if vals.shape[1] != len(names):
            raise InvalidInputError(f"{vals.shape[1]} columns but {len(names)} feature names")
        if vals.shape[0] and np.isnan(vals).all(axis=1).any():
            raise InvalidInputError("every row needs at least one present value")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    n_rounds: int = 200
    learning_rate: float = 0.1
    max_depth: int = 6
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    subsample: float = 1.0
    colsample: float = 1.0
    seed: int = 42
    base_score: float | str = "auto"

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise InvalidInputError("learning_rate must be in (0, 1]")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise InvalidInputError("reg_lambda, gamma and min_child_weight must be >= 0")
        if not (0 < self.subsample <= 1 and 0 < self.colsample <= 1):
            raise InvalidInputError("subsample and colsample must be in (0, 1]")
        if self.n_rounds < 0 or self.max_depth < 0:
            raise InvalidInputError("n_rounds and max_depth must be >= 0")
        if self.base_score != "auto" and not np.isfinite(float(self.base_score)):
            raise InvalidInputError("base_score must be finite or 'auto'")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        d = dict(d or {})
        if "lambda" in d:
            d["reg_lambda"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RegressionTree:
    """Flat node arrays; leaves have ``feature == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] < 0

    def depth(self) -> int:
        def rec(n):
            return 0 if self.feature[n] < 0 else 1 + max(rec(self.left[n]), rec(self.right[n]))

        return rec(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        n = X.shape[0]
        node = np.zeros(n, dtype=np.intp)
        rows = np.arange(n)
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            x = X[rows, np.where(internal, f, 0)]
            go_left = np.where(np.isnan(x), self.default_left[node], x < self.threshold[node])
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, nxt, node)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self, feature_names=None) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                nodes.append({"id": i, "leaf": float(self.value[i]), "cover": float(self.cover[i])})
            else:
                nodes.append(
                    {
                        "id": i,
                        "feature": int(self.feature[i]),
                        "threshold": float(self.threshold[i]),
                        "default_left": bool(self.default_left[i]),
                        "left": int(self.left[i]),
                        "right": int(self.right[i]),
                        "cover": float(self.cover[i]),
                    }
                )
        return {"nodes": nodes}

    @classmethod
    def from_nodes(cls, nodes: list) -> "RegressionTree":
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.intp)
        threshold = np.zeros(n)
        default_left = np.ones(n, dtype=bool)
        left = np.full(n, -1, dtype=np.intp)
        right = np.full(n, -1, dtype=np.intp)
        value = np.zeros(n)
        cover = np.full(n, np.nan)
        for i, node in enumerate(nodes):
            if node.get("id", i) != i:
                raise MalformedInputError(f"node ids must be 0..n-1 in order, got {node.get('id')} at {i}")
            if "cover" in node:
                cover[i] = float(node["cover"])
            if "leaf" in node:
                value[i] = float(node["leaf"])
            else:
                feature[i] = int(node["feature"])
                threshold[i] = float(node["threshold"])
                default_left[i] = bool(node.get("default_left", True))
                left[i] = int(node["left"])
                right[i] = int(node["right"])
                if not (0 <= left[i] < n and 0 <= right[i] < n):
                    raise MalformedInputError(f"node {i} has out-of-range children")
        return cls(feature, threshold, default_left, left, right, value, cover)

    @property
    def has_cover(self) -> bool:
        return bool(np.isfinite(self.cover).all())


@dataclass
class Ensemble:
    base_score: float
    eta: float
    feature_names: tuple
    trees: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def raw_tree_sum(self, X: np.ndarray) -> np.ndarray:
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict(X)
        return total

    def predict(self, X) -> np.ndarray:
        return predict(self, X)

    @property
    def feature_names_sha256(self) -> str:
        return hashlib.sha256("\n".join(self.feature_names).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "base_score": float(self.base_score),
            "eta": float(self.eta),
            "feature_names": list(self.feature_names),
            "feature_names_sha256": self.feature_names_sha256,
            "config": self.config,
            "trees": [t.to_dict() for t in self.trees],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "Ensemble":
        try:
            names = tuple(d["feature_names"])
            model = cls(
                base_score=float(d["base_score"]),
                eta=float(d["eta"]),
                feature_names=names,
                trees=[RegressionTree.from_nodes(t["nodes"]) for t in d["trees"]],
                config=d.get("config", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedInputError(f"invalid model document: {exc}") from exc
        digest = d.get("feature_names_sha256")
        if digest is not None and digest != model.feature_names_sha256:
            raise MalformedInputError("feature_names_sha256 does not match feature_names")
        for t in model.trees:
            if (t.feature >= len(names)).any():
                raise MalformedInputError("tree references a feature index beyond feature_names")
        return model

    @classmethod
    def from_json(cls, text: str) -> "Ensemble":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise MalformedInputError(f"model JSON: {exc}") from exc


def save_model(model: Ensemble, path) -> None:
    Path(path).write_text(model.to_json())


def load_model(path) -> Ensemble:
    return Ensemble.from_json(Path(path).read_text())


# -- training -----------------------------------------------------------------


class _Grower:
    def __init__(self, X, g, h, features, cfg: TrainConfig):
        self.X = X
        self.g = g
        self.h = h
        self.features = features
        self.cfg = cfg
        self.lam = cfg.reg_lambda
        self.nodes = []

    def _score(self, G, H):
        return G * G / (H + self.lam)

    def best_split(self, rows, sorted_rows, G, H):
        cfg = self.cfg
        parent = self._score(G, H)
        best = (0.0, None)
        for j in self.features:
            s = sorted_rows[j]
            if s.size < 2:
                continue
            xs = self.X[s, j]
            distinct = xs[1:] > xs[:-1]
            if not distinct.any():
                continue
            gl = np.cumsum(self.g[s])
            hl = np.cumsum(self.h[s])
            g_nm, h_nm = gl[-1], hl[-1]
            gl, hl = gl[:-1], hl[:-1]
            g_miss, h_miss = G - g_nm, H - h_nm
            has_missing = s.size < rows.size
            options = [(True, gl + g_miss, hl + h_miss)]
            if has_missing:
                options.append((False, gl, hl))
            feat_best = None
            for default_left, GL, HL in options:
                GR, HR = G - GL, H - HL
                ok = distinct & (HL >= cfg.min_child_weight) & (HR >= cfg.min_child_weight)
                if not ok.any():
                    continue
                gain = 0.5 * (self._score(GL, HL) + self._score(GR, HR) - parent) - cfg.gamma
                gain = np.where(ok, gain, -np.inf)
                i = int(np.argmax(gain))
                cand = (float(gain[i]), i, default_left)
                if feat_best is None or cand[0] > feat_best[0] or (cand[0] == feat_best[0] and cand[1] < feat_best[1]):
                    feat_best = cand
            if feat_best is None:
                continue
            gain, i, default_left = feat_best
            if gain > best[0]:
                lo, hi = xs[i], xs[i + 1]
                thr = lo + (hi - lo) / 2.0
                if not lo < thr <= hi:
                    thr = hi
                best = (gain, (j, thr, default_left))
        return best

    def grow(self, rows, sorted_rows, depth):
        G = float(np.sum(self.g[rows]))
        H = float(np.sum(self.h[rows]))
        node = len(self.nodes)
        self.nodes.append(None)
        split = None
        if depth < self.cfg.max_depth and rows.size >= 2:
            gain, split = self.best_split(rows, sorted_rows, G, H)
        if split is None:
            self.nodes[node] = (-1, 0.0, True, -1, -1, -G / (H + self.lam), H)
            return node
        j, thr, default_left = split
        x = self.X[:, j]
        go_left = np.zeros(self.X.shape[0], dtype=bool)
        xr = x[rows]
        go_left[rows] = np.where(np.isnan(xr), default_left, xr < thr)
        left_rows = rows[go_left[rows]]
        right_rows = rows[~go_left[rows]]
        left_sorted = {f: s[go_left[s]] for f, s in sorted_rows.items()}
        right_sorted = {f: s[~go_left[s]] for f, s in sorted_rows.items()}
        left = self.grow(left_rows, left_sorted, depth + 1)
        right = self.grow(right_rows, right_sorted, depth + 1)
        self.nodes[node] = (j, thr, default_left, left, right, 0.0, H)
        return node

    def tree(self) -> RegressionTree:
        cols = list(zip(*self.nodes))
        return RegressionTree(
            feature=np.array(cols[0], dtype=np.intp),
            threshold=np.array(cols[1], dtype=np.float64),
            default_left=np.array(cols[2], dtype=bool),
            left=np.array(cols[3], dtype=np.intp),
            right=np.array(cols[4], dtype=np.intp),
            value=np.array(cols[5], dtype=np.float64),
            cover=np.array(cols[6], dtype=np.float64),
        )


def _coerce_table(table, feature_names=None) -> FeatureTable:
    if isinstance(table, FeatureTable):
        return table
    X = as_2d_float(table)
    names = tuple(feature_names) if feature_names is not None else column_names(table, X.shape[1])
    return FeatureTable(X, names)


def train(table, labels, cfg: TrainConfig | None = None, history: list | None = None) -> Ensemble:
    """Fit a boosted-tree ensemble; ``history`` (if given) collects per-round training MSE."""
    cfg = cfg or TrainConfig()
    table = _coerce_table(table)
    X = table.values
    n, d = X.shape
    if n == 0 or d == 0:
        raise InvalidInputError("cannot train on an empty table")
    if n < 2:
        raise InvalidInputError("need at least two rows to train")
    y = as_1d_finite(labels, n, "labels")

    present = ~np.isnan(X)
    usable = []
    for j in range(d):
        if not present[:, j].any():
            warnings.warn(f"feature {table.feature_names[j]!r} is entirely missing; skipped", stacklevel=2)
        else:
            usable.append(j)
    presorted = {j: np.flatnonzero(present[:, j])[np.argsort(X[present[:, j], j], kind="stable")] for j in usable}

    base = float(np.mean(y)) if cfg.base_score == "auto" else float(cfg.base_score)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    pred = np.full(n, base)
    h = np.ones(n)
    trees = []
    if history is not None:
        history.append(float(np.mean((pred - y) ** 2)))
    for _ in range(cfg.n_rounds):
        g = pred - y
        if cfg.subsample < 1.0:
            k = max(1, int(round(cfg.subsample * n)))
            rows = np.sort(rng.choice(n, size=k, replace=False))
            member = np.zeros(n, dtype=bool)
            member[rows] = True
            sorted_rows = {j: s[member[s]] for j, s in presorted.items()}
        else:
            rows = np.arange(n)
            sorted_rows = presorted
        features = usable
        if cfg.colsample < 1.0 and usable:
            k = max(1, int(round(cfg.colsample * len(usable))))
            features = sorted(int(f) for f in rng.choice(usable, size=k, replace=False))
        grower = _Grower(X, g, h, features, cfg)
        grower.grow(rows, {j: sorted_rows[j] for j in features}, 0)
        tree = grower.tree()
        trees.append(tree)
        pred = pred + cfg.learning_rate * tree.predict(X)
        if history is not None:
            history.append(float(np.mean((pred - y) ** 2)))
    return Ensemble(
        base_score=base,
        eta=cfg.learning_rate,
        feature_names=table.feature_names,
        trees=trees,
        config=cfg.to_dict(),
    )


def _align(model: Ensemble, rows) -> np.ndarray:
    if isinstance(rows, FeatureTable) or hasattr(rows, "columns"):
        table = rows if isinstance(rows, FeatureTable) else _coerce_table(rows)
        missing = [f for f in model.feature_names if f not in table.feature_names]
        if missing:
            raise InvalidInputError(f"rows lack model features: {missing}")
        idx = [table.feature_names.index(f) for f in model.feature_names]
        return table.values[:, idx]
    X = as_2d_float(rows)
    if X.shape[1] != len(model.feature_names):
        raise InvalidInputError(f"expected {len(model.feature_names)} feature columns, got {X.shape[1]}")
    return X


def predict(model: Ensemble, rows) -> np.ndarray:
    """``base_score + eta * sum(tree outputs)`` for every row."""
    X = _align(model, rows)
    return model.base_score + model.eta * model.raw_tree_sum(X)


class GBDTRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn regressor around :func:`train` / :func:`predict`.

    Hyperparameters mirror :class:`TrainConfig`. NaN entries in ``X`` are
    treated as missing and routed by each split's default direction.
    """

    def __init__(
        self,
        n_rounds=200,
        learning_rate=0.1,
        max_depth=6,
        reg_lambda=1.0,
        gamma=0.0,
        min_child_weight=1.0,
        subsample=1.0,
        colsample=1.0,
        seed=42,
        base_score="auto",
    ):
        self.n_rounds = n_rounds
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.reg_lambda = reg_lambda
        self.gamma = gamma
        self.min_child_weight = min_child_weight
        self.subsample = subsample
        self.colsample = colsample
        self.seed = seed
        self.base_score = base_score

    def fit(self, X, y):
        cfg = TrainConfig(**self.get_params())
        table = _coerce_table(X)
        self.train_loss_ = []
        self.ensemble_ = train(table, y, cfg, history=self.train_loss_)
        self.n_features_in_ = table.values.shape[1]
        if hasattr(X, "columns"):
            self.feature_names_in_ = np.asarray(table.feature_names, dtype=object)
        return self

    def predict(self, X):
        check_is_fitted(self, "ensemble_")
        return predict(self.ensemble_, X)
