"""Marginal-likelihood training loop.

Maximizes the (weighted) log marginal likelihood over log-parametrized
hyperparameters rho = (ln eps_1..G, ln sigma_1..S) with limited-memory
BFGS, so positivity needs no explicit constraint handling. Each objective
evaluation solves one cache; the per-instance gradients are tied into
per-group sums before the log-space chain rule is applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .core import GroupedDataset, HyperParams, TrainedModel
from .errors import DimensionError, GpgcError, InitializationError
from .lowrank import (
    build_cache,
    grad_noise,
    grad_scales,
    prediction_weights,
    reweighted_log_marginal,
)
from .oracle import Oracle

# returned to the line search when a probed point is not evaluable
_PENALTY = 1e30


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 500
    grad_tol: float = 1e-5       # infinity norm of the log-space gradient
    obj_rel_tol: float = 1e-9    # relative objective decrease threshold
    memory: int = 10             # curvature pairs kept by the optimizer
    init_eps: float = 1.0
    init_sigma: float | None = None   # default 1/sqrt(k)
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1 or self.memory < 1:
            raise GpgcError("max_iters and memory must be >= 1")
        if min(self.grad_tol, self.obj_rel_tol) <= 0:
            raise GpgcError("tolerances must be positive")


@dataclass
class TrainingReport:
    iterations: int
    final_lml: float
    converged_by: str            # gradient | objective | max_iters
    lml_trace: list[float] = field(default_factory=list)
    warning: str | None = None


def tie_gradients(per_instance: np.ndarray, group_of: np.ndarray,
                  n_groups: int) -> np.ndarray:
    """Sum per-instance values over each group (adjoint of the gather)."""
    per_instance = np.asarray(per_instance, dtype=np.float64)
    return np.bincount(group_of, weights=per_instance, minlength=n_groups)


def predict_labels(model: TrainedModel, features: np.ndarray) -> np.ndarray:
    """Signs of the posterior means; an exact zero maps to +1."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if feats.shape[1] != model.k:
        raise DimensionError(f"features must have {model.k} columns")
    means = feats @ model.beta
    return np.where(means >= 0.0, 1.0, -1.0)


class _Objective:
    """Negated weighted log marginal likelihood over log-hyperparameters."""

    def __init__(self, oracle, dataset, weights, scale_group_of):
        self.oracle = oracle
        self.dataset = dataset
        self.weights = weights
        self.scale_group_of = scale_group_of
        self.n_groups = dataset.n_groups
        self.last_f: float | None = None
        self.last_x: np.ndarray | None = None

    def hyper_at(self, rho: np.ndarray) -> HyperParams:
        theta = np.exp(rho)
        return HyperParams(
            eps=theta[: self.n_groups],
            sigma=theta[self.n_groups:],
            scale_group_of=self.scale_group_of,
        )

    def __call__(self, rho: np.ndarray):
        theta = np.exp(rho)
        if not np.all(np.isfinite(theta)) or np.any(theta == 0.0):
            return _PENALTY, np.zeros_like(rho)
        try:
            hyper = self.hyper_at(rho)
            cache = build_cache(self.oracle, self.dataset, hyper, self.weights)
            value = reweighted_log_marginal(cache, hyper, self.dataset, self.weights)
            g_eps = grad_noise(cache, hyper, self.dataset, self.weights)
            g_sig = grad_scales(cache, hyper)
        except (GpgcError, FloatingPointError):
            return _PENALTY, np.zeros_like(rho)
        if not np.isfinite(value):
            return _PENALTY, np.zeros_like(rho)
        grad_rho = theta * np.concatenate([g_eps, g_sig])
        self.last_x = rho.copy()
        self.last_f = value
        return -value, -grad_rho


def _converged_by(status: int, message: str) -> tuple[str, str | None]:
    text = message.upper()
    if status == 1:
        return "max_iters", None
    if status == 0:
        if "PGTOL" in text or "GRADIENT" in text:
            return "gradient", None
        return "objective", None
    return "objective", f"line search failed, best iterate returned: {message}"


def _run_once(objective: _Objective, rho0: np.ndarray,
              config: OptimizerConfig) -> tuple[np.ndarray, TrainingReport]:
    f0, _ = objective(rho0)
    if f0 >= _PENALTY:
        raise InitializationError("objective is non-finite at the initial point")
    trace = [-f0]

    def record(xk):
        if objective.last_x is not None and np.array_equal(xk, objective.last_x):
            trace.append(objective.last_f)
        else:
            trace.append(-objective(xk)[0])

    result = minimize(
        objective,
        rho0,
        jac=True,
        method="L-BFGS-B",
        callback=record,
        options=dict(
            maxiter=config.max_iters,
            maxcor=config.memory,
            ftol=config.obj_rel_tol,
            gtol=config.grad_tol,
        ),
    )
    converged_by, warning = _converged_by(result.status, str(result.message))
    report = TrainingReport(
        iterations=int(result.nit),
        final_lml=float(-result.fun),
        converged_by=converged_by,
        lml_trace=trace,
        warning=warning,
    )
    return result.x, report


def train(oracle: Oracle, dataset: GroupedDataset,
          weights: np.ndarray | None = None,
          scale_group_of: np.ndarray | None = None,
          config: OptimizerConfig | None = None,
          restarts: int = 1) -> tuple[TrainedModel, TrainingReport]:
    """Learn noise and scale hyperparameters, then bake a prediction model.

    ``restarts > 1`` reruns the ascent from multiplicatively jittered
    starting points (factor e^u, u ~ U(-0.5, 0.5)) and keeps the best final
    objective.
    """
    config = config or OptimizerConfig()
    if weights is None:
        weights = dataset.weights
    weights = np.asarray(weights, dtype=np.float64)
    if scale_group_of is None:
        scale_group_of = np.zeros(oracle.k, dtype=np.int64)
    scale_group_of = np.asarray(scale_group_of, dtype=np.int64)
    n_scale = int(scale_group_of.max()) + 1 if scale_group_of.size else 1

    init_sigma = config.init_sigma
    if init_sigma is None:
        init_sigma = 1.0 / np.sqrt(oracle.k)
    rho0 = np.log(np.concatenate([
        np.full(dataset.n_groups, config.init_eps),
        np.full(n_scale, init_sigma),
    ]))

    objective = _Objective(oracle, dataset, weights, scale_group_of)
    rng = np.random.default_rng(config.seed)
    best: tuple[np.ndarray, TrainingReport] | None = None
    for attempt in range(max(1, restarts)):
        start = rho0 if attempt == 0 else rho0 + rng.uniform(-0.5, 0.5, rho0.shape)
        rho, report = _run_once(objective, start, config)
        if best is None or report.final_lml > best[1].final_lml:
            best = (rho, report)
    rho, report = best

    hyper = objective.hyper_at(rho)
    cache = build_cache(oracle, dataset, hyper, weights)
    model = TrainedModel(
        beta=prediction_weights(cache),
        hyper=hyper,
        group_confidence=-hyper.eps,
        n_instances=dataset.n_instances,
        final_lml=report.final_lml,
    )
    return model, report
