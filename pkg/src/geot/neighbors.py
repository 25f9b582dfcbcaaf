"""Exact k-nearest-neighbour queries with deterministic tie-breaking.

Candidates come from a scipy kd-tree; they are then re-ranked by squared
distance recomputed here, ties going to the lower point index.  When the
candidate window cannot rule out a tie at the k-th place the query falls
back to brute force, so results match an exhaustive search exactly.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

_MARGIN = 4


def squared_distances(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Pairwise ``||q - p||^2`` via explicit differences (no expansion trick)."""
    diff = queries[:, None, :] - points[None, :, :]
    return (diff * diff).sum(axis=-1)


def _rank(d2: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((idx, d2), axis=-1)
    return np.take_along_axis(idx, order[..., :k], axis=-1)


def knn(points: np.ndarray, queries: np.ndarray, k: int, exclude: np.ndarray | None = None) -> np.ndarray:
    """Indices of the ``k`` nearest ``points`` for each query, nearest first.

    ``exclude[q]`` names one point index that query ``q`` may not return
    (used to drop self-matches).  If fewer than ``k`` candidates exist, all
    of them are returned and the result has fewer columns.
    """
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    n_avail = len(points) - (1 if exclude is not None else 0)
    k = min(k, n_avail)
    if k <= 0 or len(queries) == 0:
        return np.zeros((len(queries), 0), dtype=np.int64)

    n_cand = min(len(points), k + _MARGIN + (1 if exclude is not None else 0))
    if n_cand == len(points):
        return _brute(points, queries, k, exclude)

    tree = cKDTree(points)
    _, cand = tree.query(queries, k=n_cand)
    cand = cand.astype(np.int64).reshape(len(queries), n_cand)
    diff = queries[:, None, :] - points[cand]
    d2 = (diff * diff).sum(axis=-1)
    if exclude is not None:
        d2 = np.where(cand == np.asarray(exclude)[:, None], np.inf, d2)
        # move the excluded self match (if present) to the end of the row
        shift = np.argsort(np.isinf(d2), axis=1, kind="stable")
        d2 = np.take_along_axis(d2, shift, axis=1)
        cand = np.take_along_axis(cand, shift, axis=1)
    finite = np.isfinite(d2)
    # kd-tree order is already by distance; re-rank only rows with ties
    with np.errstate(invalid="ignore"):
        ordered = ((d2[:, 1:] > d2[:, :-1]) | ~finite[:, 1:]).all(axis=1)
    if not ordered.all():
        rows = np.flatnonzero(~ordered)
        order = np.lexsort((cand[rows], d2[rows]), axis=-1)
        d2[rows] = np.take_along_axis(d2[rows], order, axis=1)
        cand[rows] = np.take_along_axis(cand[rows], order, axis=1)
    out = cand[:, :k].copy()

    # the window is trustworthy only if its last finite entry is strictly
    # farther than the k-th pick; otherwise an unseen tie could displace it
    last = np.where(finite[:, -1], d2[:, -1], d2[:, -2])
    unsafe = ~(last > d2[:, k - 1])
    if np.any(unsafe):
        rows = np.flatnonzero(unsafe)
        sub_ex = None if exclude is None else np.asarray(exclude)[rows]
        out[rows] = _brute(points, queries[rows], k, sub_ex)
    return out


def _brute(points, queries, k, exclude):
    out = np.empty((len(queries), k), dtype=np.int64)
    idx_all = np.arange(len(points))
    chunk = max(1, 2_000_000 // max(len(points), 1))
    for start in range(0, len(queries), chunk):
        q = queries[start : start + chunk]
        d2 = squared_distances(q, points)
        if exclude is not None:
            ex = np.asarray(exclude)[start : start + chunk]
            d2[np.arange(len(q)), ex] = np.inf
        idx = np.broadcast_to(idx_all, d2.shape)
        out[start : start + chunk] = _rank(d2, idx, k)
    return out
