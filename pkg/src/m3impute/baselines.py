"""Reference imputers: column mean/mode and distance-weighted k nearest neighbours.

Both work in scaled space (continuous columns in [0, 1], discrete columns as
class codes) and never touch observed cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import unit_values
from .exceptions import DomainError

DISTANCE_OFFSET = 1e-8


@dataclass
class ImputerOutput:
    values: np.ndarray
    imputed: np.ndarray  # True where a cell was filled in


def _prepare(D, M, n_classes):
    D = np.asarray(D, dtype=np.float64)
    M = np.asarray(M, dtype=bool)
    if D.shape != M.shape:
        raise DomainError(f"data {D.shape} and mask {M.shape} differ in shape")
    n_classes = np.zeros(D.shape[1], np.int64) if n_classes is None else np.asarray(n_classes)
    if not M.any(axis=0).all():
        raise DomainError("every column needs at least one observed entry")
    return D, M, n_classes


def column_fill(D, M, n_classes):
    """Observed mean per continuous column, most frequent code per discrete one."""
    fill = np.empty(D.shape[1])
    for j in range(D.shape[1]):
        obs = D[M[:, j], j]
        if n_classes[j] > 0:
            fill[j] = np.bincount(obs.astype(np.int64), minlength=n_classes[j]).argmax()
        else:
            fill[j] = obs.mean()
    return fill


def mean_impute(D, M, n_classes=None) -> ImputerOutput:
    """Fill each missing cell with its column's observed mean (mode if discrete)."""
    D, M, n_classes = _prepare(D, M, n_classes)
    fill = column_fill(D, M, n_classes)
    return ImputerOutput(np.where(M, D, fill), ~M)


def masked_distances(X, M, rows):
    """Euclidean distance between ``X[rows]`` and every row over commonly observed
    columns, divided by the number of such columns.

    Returns ``(dist, common)``; pairs with no common column get ``inf``.
    """
    Mf = M.astype(np.float64)
    X0 = np.where(M, X, 0.0)
    sq = X0 * X0
    a, am, asq = X0[rows], Mf[rows], sq[rows]
    total = asq @ Mf.T + am @ sq.T - 2.0 * (a @ X0.T)
    common = am @ Mf.T
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.sqrt(np.maximum(total, 0.0)) / common
    dist[common == 0] = np.inf
    return dist, common


def knn_impute(D, M, k=5, n_classes=None, block=512) -> ImputerOutput:
    """Distance-weighted kNN over commonly observed features.

    For a missing cell ``(s, f)`` the donors are the ``k`` nearest rows that
    observe ``f`` and share at least one observed feature with ``s``. Donor
    weights are ``1 / (dist + 1e-8)``; continuous cells take the weighted
    mean and discrete cells the weighted vote. With no donor the column
    mean (or mode) is used.
    """
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    D, M, n_classes = _prepare(D, M, n_classes)
    n, m = D.shape
    X = unit_values(D, n_classes)
    out = np.where(M, D, 0.0)
    fallback = column_fill(D, M, n_classes)
    lo_obs = np.where(M, D, np.inf).min(axis=0)
    hi_obs = np.where(M, D, -np.inf).max(axis=0)
    targets = np.flatnonzero((~M).any(axis=1))
    for start in range(0, targets.size, block):
        rows = targets[start:start + block]
        dist, _ = masked_distances(X, M, rows)
        for j in range(m):
            need = np.flatnonzero(~M[rows, j])
            if need.size == 0:
                continue
            dj = np.where(M[:, j], dist[need], np.inf)
            kk = min(k, n)
            nearest = np.argpartition(dj, kk - 1, axis=1)[:, :kk]
            nd = np.take_along_axis(dj, nearest, axis=1)
            donors = np.isfinite(nd)
            w = np.where(donors, 1.0 / (nd + DISTANCE_OFFSET), 0.0)
            vals = D[nearest, j]
            for i, r in enumerate(rows[need]):
                if not donors[i].any():
                    out[r, j] = fallback[j]
                elif n_classes[j] > 0:
                    votes = np.bincount(vals[i].astype(np.int64), weights=w[i],
                                        minlength=n_classes[j])
                    out[r, j] = votes.argmax()
                else:
                    p = w[i] / w[i].sum()
                    out[r, j] = min(max(p @ vals[i], lo_obs[j]), hi_obs[j])
    return ImputerOutput(out, ~M)
