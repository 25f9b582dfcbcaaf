"""Instance-dependent transition matrices from a one-layer network, and the
clean-to-noisy distribution product."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError, ParamStore

WEIGHT = "trans.weight"
BIAS = "trans.bias"


def init_transition(n_classes: int, params: ParamStore | None = None, seed: int = 0, scale: float = 0.0,
                    diag_bias: float = 0.0) -> ParamStore:
    """Affine map C -> C*C.  ``scale = 0`` gives uniform rows at start.

    ``diag_bias`` adds a constant to the diagonal logits through the bias.
    """
    params = ParamStore() if params is None else params
    C = n_classes
    rng = np.random.default_rng(seed)
    w = scale * rng.uniform(-1, 1, size=(C, C * C)) / np.sqrt(C)
    b = (diag_bias * np.eye(C)).ravel()
    params.add(WEIGHT, w, (C, C * C))
    params.add(BIAS, b, (C * C,))
    return params


def set_identity_like(params: ParamStore, n_classes: int, logit: float = 10.0) -> None:
    """Freeze-style helper: zero weights, ``logit`` on the diagonal of the bias."""
    params.set(WEIGHT, np.zeros((n_classes, n_classes * n_classes)))
    params.set(BIAS, (logit * np.eye(n_classes)).ravel())


def estimate_idtm(probs, params: ParamStore, trainable: bool = True) -> dc.Tensor:
    """Per-point C x C row-stochastic matrices, ``softmax_rows(W^T p_k + b)``."""
    probs = dc.as_tensor(probs)
    n, C = probs.shape
    if WEIGHT not in params or params.shape(WEIGHT) != (C, C * C) or params.shape(BIAS) != (C * C,):
        raise ConfigError(f"transition parameters do not match {C} classes")
    logits = dc.matmul(probs, params.tensor(WEIGHT, trainable)) + params.tensor(BIAS, trainable)
    return dc.softmax(dc.reshape(logits, (n, C, C)), axis=-1)


def apply_transition(p, T):
    """Noisy distribution ``p @ T``.

    Accepts plain arrays (a length-C vector and a C x C matrix) or batched
    tensors (N x C with N x C x C), returning the same kind.
    """
    if isinstance(p, dc.Tensor) or isinstance(T, dc.Tensor):
        p, T = dc.as_tensor(p), dc.as_tensor(T)
        if p.ndim != 2 or T.shape != (p.shape[0], p.shape[1], p.shape[1]):
            raise ValueError(f"shape mismatch: p {p.shape}, T {T.shape}")
        return dc.row_times_matrix(p, T)
    p = np.asarray(p, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if p.ndim == 1:
        if T.shape != (p.size, p.size):
            raise ValueError(f"shape mismatch: p {p.shape}, T {T.shape}")
        return p @ T
    if T.shape != (p.shape[0], p.shape[1], p.shape[1]):
        raise ValueError(f"shape mismatch: p {p.shape}, T {T.shape}")
    return np.einsum("km,kmn->kn", p, T)
