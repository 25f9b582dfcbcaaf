"""Semi-supervised point-cloud segmentation with learned, geometry-guided
noise-transition matrices, built on a small numpy autodiff core."""

from .clgs import ClassPrior, class_prior_matrix, fuse, gaussian_prior
from .cloudgen import ArchSpec, PointCloud, generate_arch, read_cloud, read_dataset, write_cloud, write_dataset
from .diffcore import ConfigError, NumericalError, ParamStore, Tensor, finite_diff_check
from .metrics import MetricsReport, evaluate, evaluate_many, knn_vote_upsample
from .objective import focal_loss, total_loss
from .plgr import AffinityGraph, build_graphs, plgr_loss
from .trainer import TrainConfig, load_config, load_model, train
from .transition import apply_transition, estimate_idtm

__version__ = "0.1.0"

__all__ = [
    "AffinityGraph", "ArchSpec", "ClassPrior", "ConfigError", "MetricsReport", "NumericalError", "ParamStore",
    "PointCloud", "Tensor", "TrainConfig", "apply_transition", "build_graphs", "class_prior_matrix",
    "estimate_idtm", "evaluate", "evaluate_many", "finite_diff_check", "focal_loss", "fuse", "gaussian_prior",
    "generate_arch", "knn_vote_upsample", "load_config", "load_model", "plgr_loss", "read_cloud", "read_dataset",
    "total_loss", "train", "write_cloud", "write_dataset",
]
