"""Input checks shared by the estimators and the benchmark runner."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import SchemaError


def check_missing_matrix(X, *, min_samples=1):
    """Validate a float matrix that marks missing cells with NaN.

    Returns ``(X, observed)`` where ``observed`` is the boolean mask.
    """
    X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan",
                    ensure_min_samples=min_samples, copy=True)
    if np.isinf(X).any():
        raise ValueError("input contains infinite values")
    observed = ~np.isnan(X)
    empty = np.flatnonzero(~observed.any(axis=0))
    if empty.size:
        raise ValueError(f"columns {empty.tolist()} have no observed values")
    return X, observed


def categorical_mask(categorical_features, n_features) -> np.ndarray:
    """Normalise ``None``, a boolean mask or an index list to a boolean mask."""
    if categorical_features is None:
        return np.zeros(n_features, bool)
    cat = np.asarray(categorical_features)
    if cat.dtype == bool:
        if cat.shape != (n_features,):
            raise ValueError(f"categorical mask has shape {cat.shape}, expected ({n_features},)")
        return cat.copy()
    mask = np.zeros(n_features, bool)
    if cat.size and (cat.min() < 0 or cat.max() >= n_features):
        raise ValueError(f"categorical indices must lie in [0, {n_features})")
    mask[cat.astype(np.int64)] = True
    return mask


def infer_class_counts(X, observed, discrete, n_classes=None) -> np.ndarray:
    """Class count per column (0 for continuous), checking observed codes are valid."""
    m = X.shape[1]
    counts = np.zeros(m, np.int64)
    given = None if n_classes is None else np.asarray(n_classes, np.int64)
    for j in np.flatnonzero(discrete):
        codes = X[observed[:, j], j]
        if np.any(codes < 0) or np.any(codes != np.round(codes)):
            raise SchemaError(f"column {j}: categorical values must be non-negative integers")
        needed = int(codes.max()) + 1
        counts[j] = max(needed, 2) if given is None else given[j]
        if counts[j] < needed:
            raise SchemaError(f"column {j}: code {needed - 1} exceeds {counts[j]} classes")
    return counts
