"""Point-level geometric regularisation.

Same-label and cross-label k-NN graphs over the original coordinates,
Gaussian-kernel weighted, and the regulariser ``M_I - M_E`` on the
Frobenius distances between the endpoints' transition matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import diffcore as dc
from .neighbors import knn

INTRINSIC = "intrinsic"
EXTRINSIC = "extrinsic"


@dataclass(frozen=True)
class AffinityGraph:
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    kind: str
    k: int
    sigma: float

    def __len__(self) -> int:
        return len(self.src)

    @classmethod
    def empty(cls, kind: str, k: int, sigma: float) -> "AffinityGraph":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), kind, k, sigma)

    def total_weight(self) -> float:
        return float(self.weight.sum())

    def edge_set(self) -> set[tuple[int, int]]:
        return set(zip(self.src.tolist(), self.dst.tolist()))


def kernel_weight(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    diff = a - b
    return np.exp(-(diff * diff).sum(axis=-1) / (sigma * sigma))


def _edges(coords, members_q, members_p, k, exclude_self):
    """k-NN edges from each point in ``members_q`` to points of ``members_p``."""
    if len(members_q) == 0 or len(members_p) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    exclude = np.arange(len(members_q)) if exclude_self else None
    local = knn(coords[members_p], coords[members_q], k, exclude=exclude)
    src = np.repeat(members_q, local.shape[1])
    dst = members_p[local].ravel()
    return src, dst


def build_graphs(coords, pseudo_labels, k1: int = 8, k2: int = 8, sigma: float = 1.0):
    """Intrinsic (same label, k1 nearest) and extrinsic (other label, k2 nearest) graphs.

    Edges are directed ``i -> j``, sorted by source then neighbour rank.
    """
    if sigma <= 0:
        raise ValueError("kernel sigma must be positive")
    if k1 < 1 or k2 < 1:
        raise ValueError("k1 and k2 must be >= 1")
    coords = np.asarray(getattr(coords, "coords", coords), dtype=np.float64)
    labels = np.asarray(pseudo_labels, dtype=np.int64)
    if labels.shape != (len(coords),):
        raise ValueError("pseudo_labels must have one entry per point")
    parts = {INTRINSIC: ([], []), EXTRINSIC: ([], [])}
    idx = np.arange(len(coords))
    for lab in np.unique(labels):
        same = idx[labels == lab]
        other = idx[labels != lab]
        s, d = _edges(coords, same, same, k1, exclude_self=True)
        parts[INTRINSIC][0].append(s)
        parts[INTRINSIC][1].append(d)
        s, d = _edges(coords, same, other, k2, exclude_self=False)
        parts[EXTRINSIC][0].append(s)
        parts[EXTRINSIC][1].append(d)
    graphs = []
    for kind, k in ((INTRINSIC, k1), (EXTRINSIC, k2)):
        srcs, dsts = parts[kind]
        if not srcs or sum(len(s) for s in srcs) == 0:
            graphs.append(AffinityGraph.empty(kind, k, sigma))
            continue
        src, dst = np.concatenate(srcs), np.concatenate(dsts)
        order = np.argsort(src, kind="stable")
        src, dst = src[order], dst[order]
        graphs.append(AffinityGraph(src, dst, kernel_weight(coords[src], coords[dst], sigma), kind, k, sigma))
    return graphs[0], graphs[1]


def _weighted_sq_dist(graph: AffinityGraph, T: dc.Tensor) -> dc.Tensor:
    """``sum_e w_e ||T[src_e] - T[dst_e]||_F^2`` as a single tape node."""
    if len(graph) == 0:
        return dc.Tensor(0.0)
    n = T.shape[0]
    if graph.src.max() >= n or graph.dst.max() >= n or min(graph.src.min(), graph.dst.min()) < 0:
        raise IndexError(f"graph refers to points outside [0, {n})")
    X = T.data.reshape(n, -1)
    diff = X[graph.src] - X[graph.dst]
    value = float(np.einsum("e,ed,ed->", graph.weight, diff, diff))

    def grad(g):
        # signed incidence: +1 at the source row, -1 at the destination row
        E = len(graph)
        rows = np.concatenate([graph.src, graph.dst])
        cols = np.concatenate([np.arange(E), np.arange(E)])
        vals = np.concatenate([np.ones(E), -np.ones(E)])
        inc = sparse.csr_matrix((vals, (rows, cols)), shape=(n, E))
        return (inc @ (diff * (2.0 * g * graph.weight)[:, None])).reshape(T.shape)

    return dc.make_op(np.asarray(value), (T,), (grad,))


def plgr_loss(intrinsic: AffinityGraph, extrinsic: AffinityGraph, T):
    """Return ``(M_I, M_E, L_m)`` as tensors; ``L_m = M_I - M_E``."""
    T = dc.as_tensor(T)
    m_i = _weighted_sq_dist(intrinsic, T)
    m_e = _weighted_sq_dist(extrinsic, T)
    return m_i, m_e, m_i - m_e
