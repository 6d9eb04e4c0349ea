import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpgc.core import (
    GroupedDataset,
    HyperParams,
    TrainedModel,
    balance_weights,
    expand_noise,
    load_dataset,
    load_model,
    read_feature_file,
    read_groups,
    read_labels,
    read_weights,
    save_model,
    write_feature_file,
)
from gpgc.errors import (
    BalanceError,
    DataFormatError,
    DimensionError,
    LabelError,
    NumericError,
)
from gpgc.hyperopt import tie_gradients

from helpers import write_dataset_files


def small_dataset(labels, group_of, n_groups, weights=None):
    labels = np.asarray(labels, dtype=float)
    if weights is None:
        weights = np.ones(len(labels))
    return GroupedDataset(
        labels=labels, group_of=np.asarray(group_of), weights=weights,
        n_groups=n_groups,
    )


class TestLoadDataset:
    def test_minimal_valid_files(self, tmp_path):
        features = np.array([[1.0, 2.0], [3.0, 4.0]])
        paths = write_dataset_files(tmp_path, features, [1, -1], ["img0", "img0"])
        shard, dataset, header, tokens = load_dataset(*paths)
        assert dataset.n_instances == 2
        assert dataset.n_groups == 1
        assert header.k == 2
        assert tokens == ["img0"]
        np.testing.assert_array_equal(shard.data, features)

    def test_zero_label_rejected(self, tmp_path):
        features = np.ones((2, 2))
        paths = write_dataset_files(tmp_path, features, [1, -1], ["a", "b"])
        paths[1].write_text("1\n0\n")
        with pytest.raises(LabelError):
            load_dataset(*paths)

    def test_count_mismatch(self, tmp_path):
        features = np.ones((6, 2))
        paths = write_dataset_files(
            tmp_path, features, [1, -1, 1, -1, 1, -1], list("abcdef")
        )
        paths[1].write_text("1\n-1\n1\n-1\n1\n")  # only 5 labels
        with pytest.raises(DataFormatError):
            load_dataset(*paths)

    def test_nonfinite_feature_rejected(self, tmp_path):
        features = np.ones((2, 2))
        features[1, 1] = np.nan
        path = tmp_path / "bad.feat"
        # bypass the writer's implicit validation by patching bytes
        write_feature_file(path, np.ones((2, 2)))
        raw = bytearray(path.read_bytes())
        raw[-8:] = np.float64(np.nan).tobytes()
        path.write_bytes(bytes(raw))
        with pytest.raises(NumericError):
            read_feature_file(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "trunc.feat"
        write_feature_file(path, np.ones((4, 3)))
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(DataFormatError):
            read_feature_file(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.feat"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(DataFormatError):
            read_feature_file(path)


class TestFeatureFile:
    def test_round_trip_values_and_scale_groups(self, tmp_path):
        rng = np.random.default_rng(0)
        features = rng.standard_normal((7, 5))
        path = tmp_path / "f.feat"
        write_feature_file(path, features, scale_boundaries=[2, 4, 5])
        back, header = read_feature_file(path)
        np.testing.assert_array_equal(back, features)
        assert header.n_scale_groups == 3
        np.testing.assert_array_equal(header.scale_group_of(), [0, 0, 1, 1, 2])

    def test_default_single_scale_group(self, tmp_path):
        path = tmp_path / "f.feat"
        write_feature_file(path, np.ones((2, 4)))
        _, header = read_feature_file(path)
        np.testing.assert_array_equal(header.scale_group_of(), [0, 0, 0, 0])

    def test_bad_boundaries_rejected(self, tmp_path):
        with pytest.raises(DataFormatError):
            write_feature_file(tmp_path / "x.feat", np.ones((2, 4)), [2, 2, 4])
        with pytest.raises(DataFormatError):
            write_feature_file(tmp_path / "x.feat", np.ones((2, 4)), [2, 3])


class TestTextInputs:
    def test_labels_accept_plus_and_bare_one(self, tmp_path):
        path = tmp_path / "labels.txt"
        path.write_text("+1\n1\n-1\n")
        np.testing.assert_array_equal(read_labels(path), [1.0, 1.0, -1.0])

    def test_labels_reject_other_values(self, tmp_path):
        path = tmp_path / "labels.txt"
        path.write_text("2\n")
        with pytest.raises(LabelError):
            read_labels(path)

    def test_groups_first_appearance_order(self, tmp_path):
        path = tmp_path / "groups.txt"
        path.write_text("dog\ncat\ndog\nbird\ncat\n")
        group_of, tokens = read_groups(path)
        assert tokens == ["dog", "cat", "bird"]
        np.testing.assert_array_equal(group_of, [0, 1, 0, 2, 1])

    def test_weights_positive(self, tmp_path):
        path = tmp_path / "w.txt"
        path.write_text("1.5\n-2.0\n")
        with pytest.raises(DataFormatError):
            read_weights(path)


class TestDatasetInvariants:
    def test_group_index_out_of_range(self):
        with pytest.raises(DataFormatError):
            small_dataset([1, -1], [0, 2], n_groups=2)

    def test_empty_group_rejected(self):
        with pytest.raises(DataFormatError):
            small_dataset([1, -1], [0, 0], n_groups=2)

    def test_nonpositive_weight_rejected(self):
        with pytest.raises(DataFormatError):
            small_dataset([1, -1], [0, 0], n_groups=1, weights=np.array([1.0, 0.0]))

    def test_arrays_are_immutable(self):
        ds = small_dataset([1, -1], [0, 1], n_groups=2)
        with pytest.raises(ValueError):
            ds.labels[0] = 5.0


class TestBalanceWeights:
    def test_three_to_one_imbalance(self):
        ds = small_dataset([1, -1, -1, -1], [0, 0, 0, 0], n_groups=1)
        w = balance_weights(ds)
        np.testing.assert_allclose(w[ds.labels > 0], 2.0)
        np.testing.assert_allclose(w[ds.labels < 0], 2.0 / 3.0)
        assert abs(w.sum() - 4.0) < 1e-9 * 4.0

    def test_already_balanced(self):
        ds = small_dataset([1, -1], [0, 0], n_groups=1)
        np.testing.assert_allclose(balance_weights(ds), [1.0, 1.0])

    def test_single_class_raises(self):
        ds = small_dataset([1, 1, 1], [0, 0, 0], n_groups=1)
        with pytest.raises(BalanceError):
            balance_weights(ds)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from([-1.0, 1.0]), min_size=2, max_size=40), st.integers(0, 999))
    def test_permutation_invariance(self, labels, seed):
        labels = np.asarray(labels)
        if (labels > 0).all() or (labels < 0).all():
            return
        ds = small_dataset(labels, np.zeros(len(labels), int), n_groups=1)
        w = balance_weights(ds)
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(labels))
        ds_p = small_dataset(labels[perm], np.zeros(len(labels), int), n_groups=1)
        np.testing.assert_array_equal(balance_weights(ds_p), w[perm])
        assert abs(w.sum() - len(labels)) < 1e-9 * len(labels)

    def test_class_totals_equal(self):
        rng = np.random.default_rng(5)
        labels = rng.choice([-1.0, 1.0], 31, p=[0.8, 0.2])
        labels[0], labels[1] = 1.0, -1.0
        ds = small_dataset(labels, np.zeros(31, int), n_groups=1)
        w = balance_weights(ds)
        assert abs(w[labels > 0].sum() - 31 / 2) < 1e-9
        assert abs(w[labels < 0].sum() - 31 / 2) < 1e-9


class TestExpandNoise:
    def test_direct_gather(self):
        ds = small_dataset([1, -1, 1], [0, 1, 1], n_groups=2)
        hyper = HyperParams(eps=[0.5, 2.0], sigma=[1.0], scale_group_of=[0])
        np.testing.assert_array_equal(expand_noise(hyper, ds), [0.5, 2.0, 2.0])

    def test_homoscedastic(self):
        ds = small_dataset([1, -1, 1, -1], [0, 0, 0, 0], n_groups=1)
        hyper = HyperParams(eps=[1.0], sigma=[1.0], scale_group_of=[0])
        np.testing.assert_array_equal(expand_noise(hyper, ds), np.ones(4))

    def test_group_count_mismatch(self):
        ds = small_dataset([1, -1], [0, 1], n_groups=2)
        hyper = HyperParams(eps=[1.0], sigma=[1.0], scale_group_of=[0])
        with pytest.raises(DimensionError):
            expand_noise(hyper, ds)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 40), st.integers(0, 999))
    def test_gather_scatter_adjoint(self, n_groups, extra, seed):
        rng = np.random.default_rng(seed)
        n = n_groups + extra
        group_of = np.concatenate([
            np.arange(n_groups), rng.integers(0, n_groups, extra)
        ])
        g = rng.standard_normal(n_groups)
        v = rng.standard_normal(n)
        lhs = float(g[group_of] @ v)
        rhs = float(g @ tie_gradients(v, group_of, n_groups))
        assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))

    def test_tie_of_unit_gradients_counts_group_sizes(self):
        ds = small_dataset([1, -1, 1, -1, 1], [0, 0, 0, 1, 1], n_groups=2)
        np.testing.assert_array_equal(
            tie_gradients(np.ones(5), ds.group_of, 2), [3.0, 2.0]
        )


class TestHyperParams:
    def test_positivity_enforced(self):
        with pytest.raises(DataFormatError):
            HyperParams(eps=[0.0], sigma=[1.0], scale_group_of=[0])
        with pytest.raises(DataFormatError):
            HyperParams(eps=[1.0], sigma=[-1.0], scale_group_of=[0])

    def test_scale_group_expansion(self):
        hyper = HyperParams(eps=[1.0], sigma=[2.0, 3.0], scale_group_of=[0, 1, 1])
        np.testing.assert_array_equal(hyper.sigma_per_feature(), [2.0, 3.0, 3.0])


class TestModelSerialization:
    def _model(self, beta, eps, sigma, scale_group_of, lml):
        hyper = HyperParams(eps=eps, sigma=sigma, scale_group_of=scale_group_of)
        return TrainedModel(
            beta=np.asarray(beta, dtype=float),
            hyper=hyper,
            group_confidence=-np.asarray(eps, dtype=float),
            n_instances=10,
            final_lml=lml,
        )

    def test_round_trip_bitwise(self, tmp_path):
        model = self._model(
            beta=[1.0 / 3.0, -2.718281828459045e-12, 7.2e100],
            eps=[0.1, 2.0000000000000004],
            sigma=[0.5773502691896258],
            scale_group_of=[0, 0, 0],
            lml=-123.45678901234567,
        )
        path = tmp_path / "m.model"
        save_model(path, model)
        back = load_model(path)
        np.testing.assert_array_equal(back.beta, model.beta)
        np.testing.assert_array_equal(back.hyper.eps, model.hyper.eps)
        np.testing.assert_array_equal(back.hyper.sigma, model.hyper.sigma)
        np.testing.assert_array_equal(
            back.hyper.scale_group_of, model.hyper.scale_group_of
        )
        assert back.final_lml == model.final_lml
        assert back.n_instances == model.n_instances

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.floats(
                allow_nan=False, allow_infinity=False,
                min_value=-1e30, max_value=1e30,
            ),
            min_size=1, max_size=6,
        )
    )
    def test_round_trip_arbitrary_beta(self, tmp_path_factory, beta):
        tmp = tmp_path_factory.mktemp("model")
        model = self._model(
            beta=beta,
            eps=[1.0],
            sigma=[1.0],
            scale_group_of=[0] * len(beta),
            lml=0.0,
        )
        path = tmp / "m.model"
        save_model(path, model)
        np.testing.assert_array_equal(load_model(path).beta, model.beta)

    def test_confidence_ranking_tracks_eps(self):
        model = self._model(
            beta=[0.0], eps=[0.3, 1.5, 0.7], sigma=[1.0], scale_group_of=[0],
            lml=0.0,
        )
        order_by_conf = np.argsort(-model.group_confidence)
        order_by_eps = np.argsort(model.hyper.eps)
        np.testing.assert_array_equal(order_by_conf, order_by_eps)
