"""Class-level prior transition matrix from per-class Gaussians and its
convex fusion with the per-point matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore

SIGMA = "clgs.sigma_raw"


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class ClassPrior:
    """Learnable widths ``sigma_m = softplus(raw_m)`` over class coordinates."""

    coords: np.ndarray

    @classmethod
    def default(cls, n_classes: int) -> "ClassPrior":
        return cls(np.arange(n_classes, dtype=np.float64))

    @property
    def n_classes(self) -> int:
        return len(self.coords)

    def init_params(self, params: ParamStore | None = None, sigma: float = 1.0) -> ParamStore:
        params = ParamStore() if params is None else params
        params.add(SIGMA, inverse_softplus(np.full(self.n_classes, sigma)))
        return params

    def sigmas(self, params: ParamStore) -> np.ndarray:
        return np.logaddexp(0.0, params.value(SIGMA))


def gaussian_prior(coords: np.ndarray, sigma) -> dc.Tensor:
    """Row-normalised ``exp(-(c_n - c_m)^2 / (2 sigma_m^2))``.

    The Gaussian's 1/(sqrt(2 pi) sigma) factor is constant per row and
    cancels in the normalisation, so it is never formed.
    """
    sigma = dc.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("every sigma_m must be positive")
    coords = np.asarray(coords, dtype=np.float64)
    sq = (coords[None, :] - coords[:, None]) ** 2  # [m, n]
    inv_var = dc.power(dc.reshape(sigma, (-1, 1)), -2.0)
    raw = dc.exp(dc.mul(inv_var, -0.5 * sq))
    return raw / dc.reshape(dc.tsum(raw, axis=1), (-1, 1))


def class_prior_matrix(prior: ClassPrior, params: ParamStore, trainable: bool = True) -> dc.Tensor:
    sigma = dc.softplus(params.tensor(SIGMA, trainable))
    return gaussian_prior(prior.coords, sigma)


def fuse(T_I, T_C, lam: float):
    """``(1 - lam) T_I[k] + lam T_C`` for every point ``k``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if isinstance(T_I, dc.Tensor) or isinstance(T_C, dc.Tensor):
        T_I, T_C = dc.as_tensor(T_I), dc.as_tensor(T_C)
        if T_I.shape[1:] != T_C.shape:
            raise ValueError(f"shape mismatch: {T_I.shape} vs {T_C.shape}")
        return dc.mul(T_I, 1.0 - lam) + dc.mul(T_C, lam)
    T_I, T_C = np.asarray(T_I, dtype=np.float64), np.asarray(T_C, dtype=np.float64)
    if T_I.shape[-2:] != T_C.shape:
        raise ValueError(f"shape mismatch: {T_I.shape} vs {T_C.shape}")
    return (1.0 - lam) * T_I + lam * T_C
