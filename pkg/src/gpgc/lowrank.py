"""Exact GP quantities for the diagonal-plus-low-rank covariance.

The training covariance is K = E + F' S F, with E the diagonal of squared
per-instance noise std-devs and S the diagonal of squared feature scales.
Every quantity below is obtained through the Sherman-Morrison-Woodbury
identity and the matrix determinant lemma on the k x k capacitance matrix

    C = S^-1 + F E^-1 F',

so the cost is O(k^3 + N) outside the four oracle queries and no N x N
matrix is ever formed.

Instance weights w emulate duplicated training instances: a weight w_i
scales the instance's noise std-dev to eps_i / sqrt(w_i), and the weighted
log marginal likelihood adds the correction 0.5 * sum(ln(w_i eps_i^2) -
w_i ln(eps_i^2)), which differs from the likelihood of the physically
duplicated dataset only by a hyperparameter-independent constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .core import GroupedDataset, HyperParams, TrainedModel, expand_noise
from .errors import DimensionError, SingularityError, StaleCacheError
from .oracle import Oracle

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GpCache:
    """All solved quantities for one hyperparameter setting.

    Immutable once built; multiple caches for different settings may
    coexist. ``chol_c`` is the lower-triangular Cholesky factor of the
    capacitance matrix.
    """

    chol_c: np.ndarray
    gram_inv_noise: np.ndarray   # F E^-1 F'
    y_tilde: np.ndarray          # E^-1 y
    f_y_tilde: np.ndarray        # F E^-1 y
    alpha: np.ndarray            # K^-1 y
    f_alpha: np.ndarray          # F K^-1 y
    inv_diag: np.ndarray         # diag(K^-1)
    fkf: np.ndarray              # F K^-1 F'
    log_det: float               # ln |K|
    quad: float                  # y' K^-1 y
    hyper: HyperParams
    weights: np.ndarray
    n: int
    k: int

    def solve_c(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve((self.chol_c, True), rhs)


def effective_noise(hyper: HyperParams, dataset: GroupedDataset,
                    weights: np.ndarray | None = None) -> np.ndarray:
    """Per-instance noise std-dev with instance weights folded in.

    A weight w_i acts like w_i copies of the instance, i.e. it divides the
    noise std-dev by sqrt(w_i).
    """
    eps = expand_noise(hyper, dataset)
    if weights is None:
        weights = dataset.weights
    return eps / np.sqrt(weights)


def _factor_capacitance(c: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(c)):
        raise SingularityError("capacitance matrix is not finite (NaN contamination)")
    try:
        chol, _ = cho_factor(c, lower=True)
        return chol
    except (LinAlgError, ValueError):
        pass
    # one retry with a tiny diagonal shift; positive hyperparameters should
    # never reach this in exact arithmetic
    jitter = 1e-10 * np.trace(c) / c.shape[0]
    try:
        chol, _ = cho_factor(c + jitter * np.eye(c.shape[0]), lower=True)
        return chol
    except (LinAlgError, ValueError) as exc:
        raise SingularityError(f"capacitance factorization failed: {exc}") from exc


def build_cache(oracle: Oracle, dataset: GroupedDataset, hyper: HyperParams,
                weights: np.ndarray | None = None) -> GpCache:
    """Solve everything needed for likelihood, gradients and prediction.

    Uses exactly one call to each oracle query plus O(k^3) dense work.
    """
    if weights is None:
        weights = dataset.weights
    weights = np.asarray(weights, dtype=np.float64)
    n, k = oracle.n, oracle.k
    if dataset.n_instances != n:
        raise DimensionError("oracle and dataset disagree on N")
    if hyper.n_features != k:
        raise DimensionError("hyperparameters and oracle disagree on k")

    eff = effective_noise(hyper, dataset, weights)
    e_var = eff * eff
    inv_e = 1.0 / e_var
    sig = hyper.sigma_per_feature()
    sig2 = sig * sig

    gram = oracle.weighted_gram(inv_e)                    # F E^-1 F'
    c = gram.copy()
    c[np.diag_indices_from(c)] += 1.0 / sig2
    chol = _factor_capacitance(c)

    y = dataset.labels
    y_tilde = y * inv_e
    f_y_tilde = oracle.mat_vec(y_tilde)                   # F E^-1 y
    c_inv_fy = cho_solve((chol, True), f_y_tilde)         # C^-1 F E^-1 y

    quad = float(y @ y_tilde - f_y_tilde @ c_inv_fy)      # y' K^-1 y
    back = oracle.mat_t_vec(c_inv_fy)                     # F' C^-1 F E^-1 y
    alpha = y_tilde - inv_e * back                        # K^-1 y
    f_alpha = f_y_tilde - gram @ c_inv_fy                 # F K^-1 y

    c_inv_gram = cho_solve((chol, True), gram)
    fkf = gram @ (np.eye(k) - c_inv_gram)
    fkf = 0.5 * (fkf + fkf.T)  # symmetric analytically, not in floats

    c_inv = cho_solve((chol, True), np.eye(k))
    c_inv = 0.5 * (c_inv + c_inv.T)
    quad_diag = oracle.diag_quadratic(c_inv)              # diag(F' C^-1 F)
    inv_diag = inv_e - quad_diag * inv_e * inv_e          # diag(K^-1)

    log_det = float(
        np.sum(np.log(e_var)) + np.sum(np.log(sig2))
        + 2.0 * np.sum(np.log(np.diag(chol)))
    )
    if not math.isfinite(log_det) or not math.isfinite(quad):
        raise SingularityError("non-finite determinant or quadratic form")

    return GpCache(
        chol_c=chol,
        gram_inv_noise=gram,
        y_tilde=y_tilde,
        f_y_tilde=f_y_tilde,
        alpha=alpha,
        f_alpha=f_alpha,
        inv_diag=inv_diag,
        fkf=fkf,
        log_det=log_det,
        quad=quad,
        hyper=hyper,
        weights=weights,
        n=n,
        k=k,
    )


def _check_cache(cache: GpCache, hyper: HyperParams,
                 weights: np.ndarray | None = None) -> None:
    same = (
        np.array_equal(cache.hyper.eps, hyper.eps)
        and np.array_equal(cache.hyper.sigma, hyper.sigma)
        and np.array_equal(cache.hyper.scale_group_of, hyper.scale_group_of)
    )
    if not same:
        raise StaleCacheError("cache was built for different hyperparameters")
    if weights is not None and not np.array_equal(cache.weights, weights):
        raise StaleCacheError("cache was built for different instance weights")


def prediction_weights(cache: GpCache) -> np.ndarray:
    """The k-vector beta with posterior mean(x) = beta . phi(x)."""
    sig = cache.hyper.sigma_per_feature()
    return sig * sig * cache.f_alpha


@dataclass(frozen=True)
class PosteriorPrediction:
    """Predictive Gaussian at one test point."""

    mean: float
    variance: float


def posterior_mean(model_or_cache, test_feature: np.ndarray) -> float:
    """Posterior mean at a test point; its sign is the predicted label."""
    phi = np.asarray(test_feature, dtype=np.float64)
    if isinstance(model_or_cache, TrainedModel):
        beta = model_or_cache.beta
    else:
        beta = prediction_weights(model_or_cache)
    if phi.shape != beta.shape:
        raise DimensionError(f"test feature must have length {beta.shape[0]}")
    return float(beta @ phi)


def predict_point(cache: GpCache, test_feature: np.ndarray) -> PosteriorPrediction:
    """Full predictive distribution at one test point."""
    return PosteriorPrediction(
        mean=posterior_mean(cache, test_feature),
        variance=posterior_variance(cache, test_feature),
    )


def posterior_variance(cache: GpCache, test_feature: np.ndarray) -> float:
    """Posterior variance at a test point, clamped at zero."""
    phi = np.asarray(test_feature, dtype=np.float64)
    if phi.shape != (cache.k,):
        raise DimensionError(f"test feature must have length {cache.k}")
    sig = cache.hyper.sigma_per_feature()
    s_phi = sig * sig * phi
    var = float(phi @ s_phi - s_phi @ cache.fkf @ s_phi)
    return max(var, 0.0)


def log_marginal(cache: GpCache, n: int) -> float:
    """Log marginal likelihood of the training labels."""
    return -0.5 * (cache.quad + cache.log_det + n * LOG_2PI)


def reweighted_log_marginal(cache: GpCache, hyper: HyperParams,
                            dataset: GroupedDataset,
                            weights: np.ndarray | None = None) -> float:
    """Weighted objective: log marginal plus the duplication correction.

    With unit weights the correction vanishes and this equals
    ``log_marginal`` exactly. Only differences across hyperparameter
    settings are meaningful (a weight-dependent constant is dropped).
    """
    if weights is None:
        weights = dataset.weights
    _check_cache(cache, hyper, weights)
    eps = expand_noise(hyper, dataset)
    log_eps2 = 2.0 * np.log(eps)
    correction = 0.5 * float(
        np.sum(np.log(weights) + log_eps2 - weights * log_eps2)
    )
    return log_marginal(cache, dataset.n_instances) + correction


def grad_noise(cache: GpCache, hyper: HyperParams, dataset: GroupedDataset,
               weights: np.ndarray | None = None) -> np.ndarray:
    """Gradient of the weighted objective w.r.t. each group noise std-dev.

    Combines the per-instance likelihood term (alpha_i^2 - diag(K^-1)_i)
    times d(eps_i/sqrt(w_i))/d(eps_g), the correction-term derivative
    (1 - w_i)/eps_g, and the groupwise tying.
    """
    if weights is None:
        weights = dataset.weights
    _check_cache(cache, hyper, weights)
    eps_i = expand_noise(hyper, dataset)
    lml_part = (cache.alpha ** 2 - cache.inv_diag) * eps_i / weights
    corr_part = (1.0 - weights) / eps_i
    per_instance = lml_part + corr_part
    return np.bincount(
        dataset.group_of, weights=per_instance, minlength=dataset.n_groups
    )


def grad_scales(cache: GpCache, hyper: HyperParams) -> np.ndarray:
    """Gradient of the objective w.r.t. each feature-scale std-dev."""
    _check_cache(cache, hyper)
    sig = hyper.sigma_per_feature()
    per_feature = (cache.f_alpha ** 2 - np.diag(cache.fkf)) * sig
    return np.bincount(
        hyper.scale_group_of, weights=per_feature, minlength=hyper.n_scale_groups
    )
