"""Focal loss, the supervised and transition-corrected unsupervised terms, and
the weighted total ``L_s + alpha * L_u + beta * L_m``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import NumericalError
from .transition import apply_transition

PROB_FLOOR = 1e-12


def _focal_values(p, gamma):
    p = np.maximum(p, PROB_FLOOR)
    return -((1.0 - p) ** gamma) * np.log(p) if gamma else -np.log(p)


def focal_loss(p, y: int, gamma: float = 2.0) -> float:
    """``-(1 - p[y])**gamma * ln p[y]`` for one distribution."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= y < p.size:
        raise ValueError(f"label {y} outside [0, {p.size})")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    return float(_focal_values(p[y], gamma))


def focal_terms(probs, labels, gamma: float = 2.0) -> dc.Tensor:
    """Per-row focal loss of an (N, C) tensor against integer labels."""
    probs = dc.as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"{labels.shape[0] if labels.ndim else 1} labels for {probs.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError("label outside class range")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    rows = np.arange(len(labels))
    raw = probs.data[rows, labels]
    py = np.maximum(raw, PROB_FLOOR)
    value = _focal_values(py, gamma)
    if gamma:
        one_minus = 1.0 - py
        # d/dp of -(1-p)^g ln p; the first term vanishes at p = 1 for every g > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            first = np.where(one_minus > 0, gamma * one_minus ** (gamma - 1) * np.log(py), 0.0)
        dpy = first - one_minus**gamma / py
    else:
        dpy = -1.0 / py
    dpy = np.where(raw >= PROB_FLOOR, dpy, 0.0)

    def grad(g):
        full = np.zeros_like(probs.data)
        full[rows, labels] = g * dpy
        return full

    return dc.make_op(value, (probs,), (grad,))


def _aggregate(terms: dc.Tensor, mode: str) -> dc.Tensor:
    if terms.shape[0] == 0:
        return dc.Tensor(0.0)
    if mode == "sum":
        return dc.tsum(terms)
    if mode == "mean":
        return dc.tmean(terms)
    raise ValueError(f"unknown aggregation {mode!r}")


def supervised_loss(P_l, Y_l, gamma: float = 2.0, mode: str = "mean") -> dc.Tensor:
    return _aggregate(focal_terms(P_l, Y_l, gamma), mode)


def corrected_unsup_loss(P_u, T_F, Y_hat, gamma: float = 2.0, mode: str = "mean") -> dc.Tensor:
    """Focal loss of the noisy distributions ``p_k T_k`` against pseudo-labels.

    ``T_F=None`` skips the correction (plain focal loss on ``P_u``).
    """
    P_u = dc.as_tensor(P_u)
    q = P_u if T_F is None else apply_transition(P_u, dc.as_tensor(T_F))
    return _aggregate(focal_terms(q, Y_hat, gamma), mode)


@dataclass(frozen=True)
class LossBreakdown:
    L_s: float
    L_u: float
    L_m: float
    total: float
    alpha: float
    beta: float
    n_labeled: int = 0
    n_unlabeled: int = 0

    def as_dict(self) -> dict:
        return {
            "L_s": self.L_s,
            "L_u": self.L_u,
            "L_m": self.L_m,
            "total": self.total,
            "alpha": self.alpha,
            "beta": self.beta,
            "n_labeled": self.n_labeled,
            "n_unlabeled": self.n_unlabeled,
        }


def combine(L_s, L_u, L_m, alpha: float = 1.0, beta: float = 0.1) -> dc.Tensor:
    """Differentiable ``L_s + alpha L_u + beta L_m``; zero-weight terms are dropped."""
    parts = dict(L_s=L_s, L_u=L_u, L_m=L_m)
    for name, value in parts.items():
        v = float(value.data) if isinstance(value, dc.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericalError(f"non-finite component {name}", name)
    total = dc.as_tensor(L_s)
    if alpha:
        total = total + dc.mul(L_u, alpha)
    if beta:
        total = total + dc.mul(L_m, beta)
    return total


def total_loss(L_s, L_u, L_m, alpha: float = 1.0, beta: float = 0.1, n_labeled: int = 0,
               n_unlabeled: int = 0) -> LossBreakdown:
    vals = [float(v.data) if isinstance(v, dc.Tensor) else float(v) for v in (L_s, L_u, L_m)]
    for name, v in zip(("L_s", "L_u", "L_m"), vals):
        if not math.isfinite(v):
            raise NumericalError(f"non-finite component {name}", name)
    s, u, m = vals
    return LossBreakdown(s, u, m, s + alpha * u + beta * m, alpha, beta, n_labeled, n_unlabeled)
