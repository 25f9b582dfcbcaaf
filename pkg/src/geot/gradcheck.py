"""Finite-difference audit of every differentiable path of the objective.

Each path is a factory ``seed -> (loss_fn, params)`` on a small seeded
instance.  :func:`run_gradcheck` compares analytic gradients against
central differences for each path and instance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .clgs import class_prior_matrix
from .cloudgen import ArchSpec, generate_arch
from .diffcore import GradReport, ParamStore
from .objective import supervised_loss
from .plgr import build_graphs, plgr_loss
from .trainer import PreparedBatch, TrainConfig, batch_objective, init_model, prepare_batch
from .transition import estimate_idtm

PathFactory = Callable[[int], tuple[Callable[[ParamStore], dc.Tensor], ParamStore]]


def _instance(seed: int, **overrides):
    rng = np.random.default_rng(seed)
    C = int(rng.integers(3, 6))
    N = int(rng.integers(16, 33))
    cfg = TrainConfig(width=8, blocks=2, k_feat=4, k1=3, k2=3, seed=seed, trans_init_scale=1.0, warmup=0.0)
    cfg = cfg.replace(**overrides)
    model = init_model(cfg, C)
    # lift hidden biases so few rectifiers start dead on such tiny inputs
    for name in model.params:
        if name.startswith("seg.") and name.endswith(".bias") and "head" not in name:
            model.params.value(name)[:] += 0.3
    # move sigma away from its symmetric start so every group has signal
    raw = model.params.value("clgs.sigma_raw")
    raw += rng.uniform(-0.5, 0.5, size=raw.shape)
    lab = generate_arch(ArchSpec(n_classes=C, n_points=N, seed=seed))
    unl = generate_arch(ArchSpec(n_classes=C, n_points=N, seed=seed + 1000)).unlabeled()
    batch = prepare_batch([lab], [unl], model, cfg, rng)
    # an untrained network tends to emit a single class; use varied
    # pseudo-labels so both affinity graphs are populated
    for view in batch.unlabeled:
        view.pseudo = rng.integers(0, C, size=len(view.pseudo))
        view.intrinsic, view.extrinsic = build_graphs(view.original.coords, view.pseudo, cfg.k1, cfg.k2,
                                                      cfg.sigma_kernel)
    return cfg, model, batch


def path_supervised(seed: int):
    cfg, model, batch = _instance(seed)
    only = PreparedBatch(labeled=batch.labeled)

    def loss_fn(p):
        return batch_objective(p, only, model, cfg, alpha=cfg.alpha)[0]

    return loss_fn, model.params


def path_corrected_unsup(seed: int):
    cfg, model, batch = _instance(seed, use_plgr=False)
    only = PreparedBatch(unlabeled=batch.unlabeled)

    def loss_fn(p):
        return batch_objective(p, only, model, cfg, alpha=1.0)[0]

    return loss_fn, model.params


def path_plgr(seed: int):
    cfg, model, batch = _instance(seed)
    view = batch.unlabeled[0]
    from .backbone import seg_forward

    def loss_fn(p):
        P_u = seg_forward(view.strong, p, model.backbone, neighbors=view.strong_neighbors)
        T_I = estimate_idtm(P_u, p)
        return plgr_loss(view.intrinsic, view.extrinsic, T_I)[2] * (1.0 / len(view.pseudo))

    return loss_fn, model.params


def path_class_prior(seed: int):
    cfg, model, _ = _instance(seed)
    C = model.n_classes
    weights = np.random.default_rng(seed + 7).standard_normal((C, C))
    params = ParamStore()
    params.add("clgs.sigma_raw", model.params.value("clgs.sigma_raw"))

    def loss_fn(p):
        return (class_prior_matrix(model.prior, p) * weights).sum()

    return loss_fn, params


def path_total(seed: int):
    cfg, model, batch = _instance(seed)

    def loss_fn(p):
        return batch_objective(p, batch, model, cfg, alpha=cfg.alpha)[0]

    return loss_fn, model.params


def path_focal_tiny(seed: int):
    """Focal loss on a 2-point, 2-class softmax with free logits."""
    rng = np.random.default_rng(seed)
    params = ParamStore()
    params.add("logits", rng.standard_normal((2, 2)))
    labels = np.array([0, 1])

    def loss_fn(p):
        return supervised_loss(dc.softmax(p.tensor("logits")), labels, gamma=2.0)

    return loss_fn, params


PATHS: dict[str, PathFactory] = {
    "focal": path_focal_tiny,
    "L_s": path_supervised,
    "L_u^C": path_corrected_unsup,
    "L_m": path_plgr,
    "T^C": path_class_prior,
    "total": path_total,
}


@dataclass
class PathResult:
    path: str
    seed: int
    report: GradReport

    @property
    def ok(self) -> bool:
        return self.report.ok

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        worst = max(self.report.max_rel_error, key=self.report.max_rel_error.get)
        return (f"{status} {self.path:6s} seed={self.seed} max_rel_err={self.report.worst():.3e} "
                f"(worst group {worst})")


def run_gradcheck(tolerance: float = 1e-4, step: float = 1e-5, seeds=range(5), paths=None) -> list[PathResult]:
    paths = PATHS if paths is None else paths
    results = []
    for name, factory in paths.items():
        for seed in seeds:
            loss_fn, params = factory(seed)
            report = dc.finite_diff_check(loss_fn, params, step=step, tolerance=tolerance)
            results.append(PathResult(name, seed, report))
    return results
