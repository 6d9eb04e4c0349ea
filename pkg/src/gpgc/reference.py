"""Dense O(N^3) ground truth for small problems.

Builds the N x N covariance explicitly and evaluates likelihood, posterior
and trace-formula gradients by direct factorization. Used by the test
suite and by the installation self-check; guarded against large inputs.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .core import GroupedDataset, HyperParams
from .errors import SizeError
from .lowrank import LOG_2PI, effective_noise

MAX_DENSE_N = 2000


def _guard(n: int) -> None:
    if n > MAX_DENSE_N:
        raise SizeError(f"dense reference limited to N <= {MAX_DENSE_N}, got {n}")


def dense_kernel(features: np.ndarray, dataset: GroupedDataset,
                 hyper: HyperParams, weights: np.ndarray | None = None) -> np.ndarray:
    """K = E + F' S F built densely; features are (N, k) instance-major."""
    _guard(dataset.n_instances)
    eff = effective_noise(hyper, dataset, weights)
    sig2 = hyper.sigma_per_feature() ** 2
    k_mat = (features * sig2) @ features.T
    k_mat[np.diag_indices_from(k_mat)] += eff * eff
    return k_mat


class DenseGp:
    """Factorized dense GP over one hyperparameter setting."""

    def __init__(self, features, dataset, hyper, weights=None):
        self.features = np.asarray(features, dtype=np.float64)
        self.dataset = dataset
        self.hyper = hyper
        self.weights = dataset.weights if weights is None else np.asarray(weights)
        self.k_eps = dense_kernel(self.features, dataset, hyper, self.weights)
        self._chol = cho_factor(self.k_eps, lower=True)
        self.alpha = cho_solve(self._chol, dataset.labels)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve(self._chol, rhs)

    def log_det(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self._chol[0]))))

    def inv(self) -> np.ndarray:
        return cho_solve(self._chol, np.eye(self.dataset.n_instances))

    def lml(self) -> float:
        y = self.dataset.labels
        return -0.5 * (
            float(y @ self.alpha) + self.log_det()
            + self.dataset.n_instances * LOG_2PI
        )

    def posterior_mean(self, test_feature: np.ndarray) -> float:
        kbar = self._cross_cov(test_feature)
        return float(kbar @ self.alpha)

    def posterior_variance(self, test_feature: np.ndarray) -> float:
        phi = np.asarray(test_feature, dtype=np.float64)
        sig2 = self.hyper.sigma_per_feature() ** 2
        kbar = self._cross_cov(phi)
        prior = float(phi @ (sig2 * phi))
        return prior - float(kbar @ self.solve(kbar))

    def inv_diag(self) -> np.ndarray:
        return np.diag(self.inv()).copy()

    def _cross_cov(self, phi: np.ndarray) -> np.ndarray:
        sig2 = self.hyper.sigma_per_feature() ** 2
        return self.features @ (sig2 * phi)


def dense_lml(features, dataset, hyper, weights=None) -> float:
    """Direct evaluation of the log marginal likelihood."""
    return DenseGp(features, dataset, hyper, weights).lml()


def dense_grad(features, dataset, hyper, weights=None, which: int = 0) -> float:
    """Trace-formula gradient for one coordinate of [eps..., sigma...].

    Evaluates 0.5 * tr((alpha alpha' - K^-1) dK/dtheta) with the explicit
    kernel derivative for the chosen coordinate, including group tying.
    The correction term of the weighted objective is not included.
    """
    gp = DenseGp(features, dataset, hyper, weights)
    n_groups = hyper.n_groups
    m = np.outer(gp.alpha, gp.alpha) - gp.inv()
    w = gp.weights
    if which < 0 or which >= n_groups + hyper.n_scale_groups:
        raise IndexError(f"coordinate {which} out of range")
    if which < n_groups:
        # dK/d(eps_g) is diagonal: 2 * eff_i / sqrt(w_i) on group members
        eff = effective_noise(hyper, dataset, w)
        members = dataset.group_of == which
        deriv_diag = np.where(members, 2.0 * eff / np.sqrt(w), 0.0)
        return 0.5 * float(np.diag(m) @ deriv_diag)
    s = which - n_groups
    in_scale = hyper.scale_group_of == s
    sigma_s = hyper.sigma[s]
    f_s = gp.features[:, in_scale]
    dk = 2.0 * sigma_s * (f_s @ f_s.T)
    return 0.5 * float(np.sum(m * dk))
