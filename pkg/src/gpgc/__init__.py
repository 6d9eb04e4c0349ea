"""GP regression with learned per-group annotation confidences.

Training fits per-group noise std-devs and per-scale-group feature scales
by marginal-likelihood ascent; low learned noise marks reliably annotated
groups. All inference is exact and matrix-free through a four-query
feature oracle, which may run locally or across worker machines.
"""

from .core import (
    GroupedDataset,
    HyperParams,
    TrainedModel,
    balance_weights,
    expand_noise,
    load_dataset,
    load_model,
    save_model,
)
from .distnet import DistributedOracle, worker_serve
from .errors import GpgcError
from .hyperopt import OptimizerConfig, TrainingReport, predict_labels, tie_gradients, train
from .lowrank import (
    GpCache,
    PosteriorPrediction,
    build_cache,
    grad_noise,
    grad_scales,
    log_marginal,
    posterior_mean,
    posterior_variance,
    predict_point,
    reweighted_log_marginal,
)
from .oracle import FeatureShard, LocalOracle, Oracle, ShardLayout

__all__ = [
    "GroupedDataset",
    "HyperParams",
    "TrainedModel",
    "balance_weights",
    "expand_noise",
    "load_dataset",
    "load_model",
    "save_model",
    "DistributedOracle",
    "worker_serve",
    "GpgcError",
    "OptimizerConfig",
    "TrainingReport",
    "predict_labels",
    "tie_gradients",
    "train",
    "GpCache",
    "PosteriorPrediction",
    "build_cache",
    "grad_noise",
    "grad_scales",
    "log_marginal",
    "posterior_mean",
    "posterior_variance",
    "predict_point",
    "reweighted_log_marginal",
    "FeatureShard",
    "LocalOracle",
    "Oracle",
    "ShardLayout",
]

__version__ = "0.1.0"
