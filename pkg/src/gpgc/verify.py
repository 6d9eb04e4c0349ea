"""Installation self-check: small-scale dense-vs-low-rank and gradient suites."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GroupedDataset, HyperParams
from .lowrank import (
    build_cache,
    grad_noise,
    grad_scales,
    log_marginal,
    posterior_mean,
    posterior_variance,
    reweighted_log_marginal,
)
from .oracle import LocalOracle
from .reference import DenseGp, dense_kernel


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_problem(rng, n, k, n_groups, n_scale):
    features = rng.standard_normal((n, k))
    labels = rng.choice([-1.0, 1.0], n)
    group_of = np.concatenate([
        np.arange(n_groups), rng.integers(0, n_groups, n - n_groups)
    ])
    weights = rng.uniform(0.5, 3.0, n)
    dataset = GroupedDataset(
        labels=labels, group_of=group_of, weights=weights, n_groups=n_groups
    )
    hyper = HyperParams(
        eps=rng.uniform(0.4, 2.0, n_groups),
        sigma=rng.uniform(0.4, 2.0, n_scale),
        scale_group_of=rng.integers(0, n_scale, k),
    )
    return features, dataset, hyper


def _check_dense_equivalence(rng) -> CheckResult:
    worst = 0.0
    for _ in range(5):
        features, dataset, hyper = _random_problem(rng, 60, 6, 8, 2)
        oracle = LocalOracle(features)
        cache = build_cache(oracle, dataset, hyper)
        gp = DenseGp(features, dataset, hyper)
        n = dataset.n_instances
        pairs = [
            (log_marginal(cache, n), gp.lml()),
        ]
        rel = max(
            abs(a - b) / max(abs(b), 1e-30) for a, b in pairs
        )
        rel = max(rel, float(np.max(
            np.abs(cache.alpha - gp.alpha) / np.maximum(np.abs(gp.alpha), 1e-12)
        )))
        phi = rng.standard_normal(features.shape[1])
        m_ref, v_ref = gp.posterior_mean(phi), gp.posterior_variance(phi)
        rel = max(rel, abs(posterior_mean(cache, phi) - m_ref) / max(abs(m_ref), 1e-12))
        rel = max(rel, abs(posterior_variance(cache, phi) - v_ref) / max(abs(v_ref), 1e-12))
        rel = max(rel, float(np.max(
            np.abs(cache.inv_diag - gp.inv_diag()) / np.abs(gp.inv_diag())
        )))
        worst = max(worst, rel)
    return CheckResult("dense-equivalence", worst < 1e-8, f"max rel err {worst:.3e}")


def _check_woodbury_identities(rng) -> CheckResult:
    features, dataset, hyper = _random_problem(rng, 80, 5, 10, 1)
    eff2 = (hyper.eps[dataset.group_of] / np.sqrt(dataset.weights)) ** 2
    sig2 = hyper.sigma_per_feature() ** 2
    k_dense = dense_kernel(features, dataset, hyper)
    c = np.diag(1.0 / sig2) + (features / eff2[:, None]).T @ features
    inv_direct = np.linalg.inv(k_dense)
    inv_lowrank = np.diag(1.0 / eff2) - (
        (features / eff2[:, None]) @ np.linalg.inv(c) @ (features / eff2[:, None]).T
    )
    err_inv = float(np.max(np.abs(inv_direct - inv_lowrank)))
    logdet_direct = float(np.linalg.slogdet(k_dense)[1])
    logdet_lemma = float(
        np.sum(np.log(eff2)) + np.sum(np.log(sig2)) + np.linalg.slogdet(c)[1]
    )
    err_det = abs(logdet_direct - logdet_lemma)
    err = max(err_inv, err_det)
    return CheckResult("woodbury-identities", err < 1e-9, f"max abs err {err:.3e}")


def _check_gradients(rng, perturb: bool) -> CheckResult:
    worst = 0.0
    for _ in range(5):
        features, dataset, hyper = _random_problem(rng, 40, 4, 5, 2)
        oracle = LocalOracle(features)
        cache = build_cache(oracle, dataset, hyper)
        g_eps = grad_noise(cache, hyper, dataset)
        g_sig = grad_scales(cache, hyper)
        if perturb:
            g_eps = g_eps + 1e-2  # intentional fault-injection hook
        analytic = np.concatenate([g_eps, g_sig])

        def objective(eps, sigma):
            h = HyperParams(eps=eps, sigma=sigma, scale_group_of=hyper.scale_group_of)
            c = build_cache(oracle, dataset, h)
            return reweighted_log_marginal(c, h, dataset)

        theta = np.concatenate([hyper.eps, hyper.sigma])
        n_groups = hyper.n_groups
        for i in range(theta.size):
            h = 1e-5 * abs(theta[i]) + 1e-8
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            fd = (
                objective(up[:n_groups], up[n_groups:])
                - objective(dn[:n_groups], dn[n_groups:])
            ) / (2 * h)
            worst = max(worst, abs(fd - analytic[i]) / max(abs(fd), 1e-8))
    return CheckResult("gradient-vs-fd", worst < 1e-5, f"max rel err {worst:.3e}")


def _check_duplication(rng) -> CheckResult:
    features, dataset, hyper = _random_problem(rng, 30, 3, 4, 1)
    counts = rng.integers(1, 4, dataset.n_instances).astype(float)
    ds_w = dataset.with_weights(counts)
    idx = np.repeat(np.arange(dataset.n_instances), counts.astype(int))
    ds_dup = GroupedDataset(
        labels=dataset.labels[idx],
        group_of=dataset.group_of[idx],
        weights=np.ones(idx.size),
        n_groups=dataset.n_groups,
    )
    o_w = LocalOracle(features)
    o_d = LocalOracle(features[idx])
    hyper2 = HyperParams(
        eps=hyper.eps * 1.3, sigma=hyper.sigma * 0.7,
        scale_group_of=hyper.scale_group_of,
    )

    def weighted(h):
        c = build_cache(o_w, ds_w, h)
        return reweighted_log_marginal(c, h, ds_w), posterior_mean(
            c, np.ones(features.shape[1])
        )

    def duplicated(h):
        c = build_cache(o_d, ds_dup, h)
        return log_marginal(c, ds_dup.n_instances), posterior_mean(
            c, np.ones(features.shape[1])
        )

    lw1, mw = weighted(hyper)
    lw2, _ = weighted(hyper2)
    ld1, md = duplicated(hyper)
    ld2, _ = duplicated(hyper2)
    err = max(abs((lw1 - lw2) - (ld1 - ld2)), abs(mw - md))
    return CheckResult("duplication-equivalence", err < 1e-8, f"max abs err {err:.3e}")


def _check_shard_invariance(rng) -> CheckResult:
    features = rng.standard_normal((53, 4))
    v = rng.standard_normal(53)
    u = rng.standard_normal(4)
    d = rng.uniform(0.5, 2.0, 53)
    a = rng.standard_normal((4, 4))
    a = 0.5 * (a + a.T)
    base = LocalOracle(features)
    ref = (base.mat_vec(v), base.mat_t_vec(u), base.weighted_gram(d),
           base.diag_quadratic(a))
    worst = 0.0
    bit_ok = True
    for p in (2, 3, 5):
        oracle = LocalOracle.from_matrix(features, n_shards=p)
        worst = max(worst, float(np.max(np.abs(oracle.mat_vec(v) - ref[0]))))
        worst = max(worst, float(np.max(np.abs(oracle.weighted_gram(d) - ref[2]))))
        bit_ok = bit_ok and np.array_equal(oracle.mat_t_vec(u), ref[1])
        bit_ok = bit_ok and np.array_equal(oracle.diag_quadratic(a), ref[3])
    passed = worst < 1e-12 and bit_ok
    return CheckResult(
        "shard-invariance", passed,
        f"sum err {worst:.3e}, concatenations bit-equal: {bit_ok}"
    )


def run_verification(perturb_gradient: bool = False, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        _check_dense_equivalence(rng),
        _check_woodbury_identities(rng),
        _check_gradients(rng, perturb_gradient),
        _check_duplication(rng),
        _check_shard_invariance(rng),
    ]
