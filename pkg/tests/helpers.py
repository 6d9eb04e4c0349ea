"""Shared generators and independent reference implementations for tests."""

from __future__ import annotations

import contextlib
import queue
import threading

import numpy as np

from gpgc.core import GroupedDataset, HyperParams
from gpgc.distnet import worker_serve


def random_problem(rng, n, k, n_groups, n_scale=1, weighted=True):
    """A random well-conditioned training problem."""
    features = rng.standard_normal((n, k))
    labels = rng.choice([-1.0, 1.0], n)
    group_of = np.concatenate([
        np.arange(n_groups),
        rng.integers(0, n_groups, n - n_groups),
    ])
    weights = rng.uniform(0.5, 3.0, n) if weighted else np.ones(n)
    dataset = GroupedDataset(
        labels=labels, group_of=group_of, weights=weights, n_groups=n_groups
    )
    hyper = HyperParams(
        eps=rng.uniform(0.4, 2.0, n_groups),
        sigma=rng.uniform(0.4, 2.0, n_scale),
        scale_group_of=rng.integers(0, n_scale, k),
    )
    return features, dataset, hyper


# -- brute-force oracles (independent of the library implementation) --------


def loop_mat_vec(features, v):
    n, k = features.shape
    out = [0.0] * k
    for j in range(k):
        for i in range(n):
            out[j] += features[i, j] * v[i]
    return np.asarray(out)


def loop_mat_t_vec(features, u):
    n, k = features.shape
    out = [0.0] * n
    for i in range(n):
        for j in range(k):
            out[i] += features[i, j] * u[j]
    return np.asarray(out)


def loop_weighted_gram(features, d):
    n, k = features.shape
    out = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            for i in range(n):
                out[a, b] += features[i, a] * d[i] * features[i, b]
    return out


def loop_diag_quadratic(features, a_mat):
    n, k = features.shape
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for a in range(k):
            for b in range(k):
                acc += features[i, a] * a_mat[a, b] * features[i, b]
        out[i] = acc
    return out


# -- synthetic classification data -------------------------------------------


def margin_linear_data(rng, n, k, margin_lo=0.9, margin_hi=1.1):
    """Linearly separable points with |beta . x| in [margin_lo, margin_hi]."""
    beta = rng.standard_normal(k)
    beta /= np.linalg.norm(beta)
    x = rng.standard_normal((n, k))
    t = x @ beta
    target = np.sign(t) * rng.uniform(margin_lo, margin_hi, n)
    x += np.outer(target - t, beta)
    y = np.sign(x @ beta)
    return x, y, beta


def clustered_group_data(seed, n=2000, k=10, n_groups=20, n_bad=4,
                         cluster_spread=0.6, n_test=1000):
    """Groups are feature-space clusters; labels come from one hyperplane.

    Flipping whole groups therefore corrupts contiguous regions, which is
    what makes the corruption hurt a plain GP fit. Returns the noisy
    training set, the indices of the flipped groups, and a clean test set.
    """
    rng = np.random.default_rng(seed)
    beta = rng.standard_normal(k)
    beta /= np.linalg.norm(beta)
    centers = rng.standard_normal((n_groups, k))

    def draw(count, groups):
        x = centers[groups] + cluster_spread * rng.standard_normal((count, k))
        t = x @ beta
        low = np.abs(t) < 0.25
        x[low] += np.outer(np.sign(t[low]) * (0.25 - np.abs(t[low]) + 0.05), beta)
        return x, np.sign(x @ beta)

    group_of = np.arange(n) % n_groups
    x_train, y_clean = draw(n, group_of)
    bad = rng.choice(n_groups, n_bad, replace=False)
    y_noisy = np.where(np.isin(group_of, bad), -y_clean, y_clean)
    x_test, y_test = draw(n_test, np.arange(n_test) % n_groups)
    return x_train, y_noisy, group_of, np.sort(bad), x_test, y_test


def rank_auc(scores, positive_mask):
    """Probability that a positive outranks a negative (ties share rank)."""
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    # average ranks over ties
    for value in np.unique(scores):
        tie = scores == value
        ranks[tie] = ranks[tie].mean()
    n_pos = int(np.count_nonzero(positive_mask))
    n_neg = len(scores) - n_pos
    rank_sum = float(np.sum(ranks[positive_mask]))
    return (rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


# -- socket workers -----------------------------------------------------------


@contextlib.contextmanager
def local_workers(count, expected_k=None):
    """Spawn worker threads on ephemeral localhost ports; yields addresses."""
    ports: queue.Queue = queue.Queue()
    threads = []
    for _ in range(count):
        thread = threading.Thread(
            target=worker_serve,
            args=("127.0.0.1:0",),
            kwargs=dict(expected_k=expected_k, on_bound=ports.put),
            daemon=True,
        )
        thread.start()
        threads.append(thread)
    addresses = [f"127.0.0.1:{ports.get(timeout=10)}" for _ in range(count)]
    try:
        yield addresses
    finally:
        for thread in threads:
            thread.join(timeout=10)


def write_dataset_files(tmp_path, features, labels, group_tokens,
                        scale_boundaries=None, prefix="data"):
    """Materialize the three input files; returns their paths."""
    from gpgc.core import write_feature_file

    features_path = tmp_path / f"{prefix}.feat"
    labels_path = tmp_path / f"{prefix}.labels"
    groups_path = tmp_path / f"{prefix}.groups"
    write_feature_file(features_path, features, scale_boundaries)
    labels_path.write_text(
        "\n".join("+1" if y > 0 else "-1" for y in labels) + "\n"
    )
    groups_path.write_text("\n".join(str(t) for t in group_tokens) + "\n")
    return features_path, labels_path, groups_path
