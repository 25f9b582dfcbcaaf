"""Segmentation network: coordinate embedding, k-NN max-aggregation blocks,
linear classifier and a per-point softmax."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError, ParamStore
from .neighbors import knn


@dataclass(frozen=True)
class BackboneConfig:
    n_classes: int
    width: int = 64
    blocks: int = 2
    k_feat: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.width < self.n_classes:
            raise ConfigError("width must be >= n_classes")
        if self.blocks < 1 or self.k_feat < 1:
            raise ConfigError("blocks and k_feat must be >= 1")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        w, C = self.width, self.n_classes
        shapes = {"seg.embed.weight": (3, w), "seg.embed.bias": (w,)}
        for b in range(self.blocks):
            shapes[f"seg.block{b}.weight"] = (2 * w, w)
            shapes[f"seg.block{b}.bias"] = (w,)
        shapes["seg.head.weight"] = (w, C)
        shapes["seg.head.bias"] = (C,)
        return shapes


def init_backbone(cfg: BackboneConfig, params: ParamStore | None = None) -> ParamStore:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases alike."""
    cfg.validate()
    params = ParamStore() if params is None else params
    rng = np.random.default_rng(cfg.seed)
    for name, shape in cfg.shapes().items():
        fan_in = shape[0] if len(shape) == 2 else _fan_in_for_bias(cfg, name)
        bound = 1.0 / np.sqrt(fan_in)
        params.add(name, rng.uniform(-bound, bound, size=shape), shape)
    return params


def _fan_in_for_bias(cfg: BackboneConfig, name: str) -> int:
    return cfg.shapes()[name.replace(".bias", ".weight")][0]


def feature_neighbors(coords: np.ndarray, k: int) -> np.ndarray:
    """k nearest other points of each point; a lone point neighbours itself."""
    n = len(coords)
    if n == 1:
        return np.zeros((1, 1), dtype=np.int64)
    return knn(coords, coords, k, exclude=np.arange(n))


def _check_shapes(params: ParamStore, cfg: BackboneConfig) -> None:
    for name, shape in cfg.shapes().items():
        if name not in params:
            raise ConfigError(f"missing parameter group '{name}'")
        if params.shape(name) != shape:
            raise ConfigError(f"'{name}' has shape {params.shape(name)}, expected {shape}")


def seg_logits(coords, params: ParamStore, cfg: BackboneConfig, neighbors=None, trainable=True) -> dc.Tensor:
    _check_shapes(params, cfg)
    coords = np.asarray(coords, dtype=np.float64)
    if neighbors is None:
        neighbors = feature_neighbors(coords, cfg.k_feat)
    t = lambda name: params.tensor(name, trainable)
    h = dc.relu(dc.matmul(coords, t("seg.embed.weight")) + t("seg.embed.bias"))
    for b in range(cfg.blocks):
        agg = dc.neighbor_max(h, neighbors)
        h = dc.relu(dc.matmul(dc.concat([h, agg], axis=1), t(f"seg.block{b}.weight")) + t(f"seg.block{b}.bias"))
    return dc.matmul(h, t("seg.head.weight")) + t("seg.head.bias")


def seg_forward(cloud, params: ParamStore, cfg: BackboneConfig, neighbors=None, trainable=True) -> dc.Tensor:
    """Per-point class distributions (N x C, rows sum to one).

    ``cloud`` may be a :class:`PointCloud` or a raw (N, 3) array.  With
    ``trainable=False`` nothing is recorded on the tape.
    """
    coords = getattr(cloud, "coords", cloud)
    return dc.softmax(seg_logits(coords, params, cfg, neighbors, trainable), axis=-1)


def predict(cloud, params: ParamStore, cfg: BackboneConfig) -> np.ndarray:
    probs = seg_forward(cloud, params, cfg, trainable=False).data
    return probs.argmax(axis=1)
