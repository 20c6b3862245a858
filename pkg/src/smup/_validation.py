"""Input coercion shared by the estimators."""

from __future__ import annotations

import numpy as np

from smup.exceptions import InvalidInputError


def as_2d_float(X, name="X") -> np.ndarray:
    """float64 2-D copy of ``X``; NaN stays (missing), +-inf is rejected."""
    if hasattr(X, "to_numpy"):
        X = X.to_numpy(dtype=np.float64, na_value=np.nan)
    arr = np.array(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, 0)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if np.isinf(arr).any():
        raise InvalidInputError(f"{name} contains infinite values")
    return arr


def as_1d_finite(y, n=None, name="y") -> np.ndarray:
    arr = np.asarray(y, dtype=np.float64).ravel()
    if n is not None and arr.size != n:
        raise InvalidInputError(f"{name} has {arr.size} entries, expected {n}")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def column_names(X, n_features):
    cols = getattr(X, "columns", None)
    if cols is not None:
        return tuple(str(c) for c in cols)
    names = getattr(X, "feature_names", None)
    if names is not None:
        return tuple(names)
    return tuple(f"f{i}" for i in range(n_features))
