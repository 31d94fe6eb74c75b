import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sscmr.dataset import (MULTI_LABEL, PAIRED, SINGLE_LABEL, UNPAIRED, ModalityDataset,
                           SyntheticSpec, generate_synthetic, holdout_split, load_dataset,
                           load_manifest, make_splits, read_matrix, save_dataset, write_matrix)
from sscmr.errors import ConfigError, LoadError


def toy_dataset():
    rng = np.random.default_rng(0)
    fx = rng.normal(size=(4, 3))
    fy = rng.normal(size=(3, 3))
    labels = np.array([[1, 0, 1], [0, 1, 0]], dtype=float)
    return ModalityDataset(fx, fy, labels, SINGLE_LABEL)


def labeled_blank(n, d_c=4):
    labels = np.zeros((d_c, n))
    labels[np.arange(n) % d_c, np.arange(n)] = 1
    return ModalityDataset(np.zeros((2, n)), np.zeros((2, n)), labels, SINGLE_LABEL)


class TestMatrixFiles:
    def test_round_trip(self, tmp_path):
        m = np.random.default_rng(1).normal(size=(3, 5)) * 1e-3
        write_matrix(tmp_path / "m.txt", m, comment="features")
        np.testing.assert_array_equal(read_matrix(tmp_path / "m.txt"), m)

    def test_header_mismatch(self, tmp_path):
        (tmp_path / "m.txt").write_text("2 3\n1 2 3\n")
        with pytest.raises(LoadError):
            read_matrix(tmp_path / "m.txt")

    def test_ragged_row(self, tmp_path):
        (tmp_path / "m.txt").write_text("2 2\n1 2\n3\n")
        with pytest.raises(LoadError, match="row 1"):
            read_matrix(tmp_path / "m.txt")

    def test_empty_file(self, tmp_path):
        (tmp_path / "m.txt").write_text("# nothing\n")
        with pytest.raises(LoadError):
            read_matrix(tmp_path / "m.txt")

    def test_non_finite(self, tmp_path):
        (tmp_path / "m.txt").write_text("1 2\n1 nan\n")
        with pytest.raises(LoadError):
            read_matrix(tmp_path / "m.txt")


class TestLoadDataset:
    def test_round_trip_bit_exact(self, tmp_path):
        data = toy_dataset()
        path = save_dataset(data, tmp_path)
        loaded = load_manifest(path)
        np.testing.assert_array_equal(loaded.features_x, data.features_x)
        np.testing.assert_array_equal(loaded.features_y, data.features_y)
        np.testing.assert_array_equal(loaded.labels, data.labels)
        assert (loaded.d_x, loaded.d_y, loaded.d_c, loaded.n_x) == (4, 3, 2, 3)

    def test_single_label_column_with_two_ones(self, tmp_path):
        write_matrix(tmp_path / "x.txt", np.zeros((2, 2)))
        write_matrix(tmp_path / "y.txt", np.zeros((2, 2)))
        write_matrix(tmp_path / "l.txt", np.array([[1, 1], [0, 1]]))
        with pytest.raises(LoadError, match="column 1"):
            load_dataset(tmp_path / "x.txt", tmp_path / "y.txt", tmp_path / "l.txt", SINGLE_LABEL)

    def test_non_binary_labels(self, tmp_path):
        write_matrix(tmp_path / "x.txt", np.zeros((2, 2)))
        write_matrix(tmp_path / "y.txt", np.zeros((2, 2)))
        write_matrix(tmp_path / "l.txt", np.array([[1, 0.5], [0, 1]]))
        with pytest.raises(LoadError, match="column 1"):
            load_dataset(tmp_path / "x.txt", tmp_path / "y.txt", tmp_path / "l.txt", MULTI_LABEL)

    def test_empty_labels_rejected(self, tmp_path):
        write_matrix(tmp_path / "x.txt", np.zeros((2, 3)))
        write_matrix(tmp_path / "y.txt", np.zeros((2, 3)))
        (tmp_path / "l.txt").write_text("")
        with pytest.raises(LoadError):
            load_dataset(tmp_path / "x.txt", tmp_path / "y.txt", tmp_path / "l.txt", SINGLE_LABEL)

    def test_multi_label_needs_a_tag(self):
        with pytest.raises(LoadError, match="column 0"):
            ModalityDataset(np.zeros((2, 1)), np.zeros((2, 1)), np.zeros((3, 1)), MULTI_LABEL)

    def test_paired_counts_must_match(self):
        with pytest.raises(LoadError):
            ModalityDataset(np.zeros((2, 3)), np.zeros((2, 4)), np.eye(2)[:, [0, 1, 0]],
                            SINGLE_LABEL, PAIRED)

    def test_unpaired_counts_detected(self, tmp_path):
        write_matrix(tmp_path / "x.txt", np.zeros((2, 4)))
        write_matrix(tmp_path / "y.txt", np.zeros((2, 5)))
        write_matrix(tmp_path / "l.txt", np.eye(2)[:, [0, 1]])
        data = load_dataset(tmp_path / "x.txt", tmp_path / "y.txt", tmp_path / "l.txt",
                            SINGLE_LABEL)
        assert data.pairing == UNPAIRED
        assert data.n_labeled == 2 and not data.fully_labeled

    def test_manifest_test_section(self, tmp_path):
        data = toy_dataset()
        save_dataset(data, tmp_path, prefix="test_")
        path = save_dataset(data, tmp_path, extra={"test": json.loads(
            (tmp_path / "test_manifest.json").read_text())})
        assert load_manifest(path, section="test").n_x == 3
        assert load_manifest(tmp_path / "test_manifest.json", section="test") is None


class TestSynthetic:
    def test_zero_noise_collapses_classes(self):
        data = generate_synthetic(SyntheticSpec(d_c=4, samples_per_class=5, noise_sigma=0.0))
        for c in range(4):
            cols = data.features_x[:, data.labels[c] == 1]
            np.testing.assert_array_equal(cols, np.repeat(cols[:, :1], cols.shape[1], axis=1))

    def test_same_seed_same_data(self):
        a = generate_synthetic(SyntheticSpec(seed=7))
        b = generate_synthetic(SyntheticSpec(seed=7))
        np.testing.assert_array_equal(a.features_x, b.features_x)
        np.testing.assert_array_equal(a.features_y, b.features_y)
        c = generate_synthetic(SyntheticSpec(seed=8))
        assert not np.array_equal(a.features_x, c.features_x)

    def test_one_nearest_neighbour_oracle(self):
        data = generate_synthetic(SyntheticSpec(d_c=10, samples_per_class=30, noise_sigma=0.1,
                                                seed=3))
        train, test = holdout_split(data, 0.3, seed=0)
        d2 = ((test.features_x[:, :, None] - train.features_x[:, None, :]) ** 2).sum(axis=0)
        pred = np.argmax(train.labels[:, np.argmin(d2, axis=1)], axis=0)
        assert np.mean(pred == np.argmax(test.labels, axis=0)) >= 0.95

    @pytest.mark.parametrize("mode,prob", [(SINGLE_LABEL, 0.0), (MULTI_LABEL, 0.3)])
    def test_label_invariants(self, mode, prob):
        data = generate_synthetic(SyntheticSpec(label_mode=mode, multi_label_extra_tag_prob=prob))
        counts = data.labels.sum(axis=0)
        if mode == SINGLE_LABEL:
            assert np.all(counts == 1)
        else:
            assert np.all(counts >= 1) and counts.max() > 1

    def test_bad_spec(self):
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticSpec(d_x=1))
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticSpec(multi_label_extra_tag_prob=1.5))


class TestSplits:
    def test_supervised_has_no_unlabeled(self):
        split = make_splits(labeled_blank(100))
        assert split.unlabeled_idx.size == 0

    def test_wiki_protocol_size(self):
        split = make_splits(labeled_blank(2000), labeled_fraction=0.75)
        assert split.labeled_idx.size == 1500

    def test_anchor_val_train_sizes(self):
        split = make_splits(labeled_blank(1000), nn_fraction=0.2, val_fraction=0.1)
        assert (split.nn_idx.size, split.val_idx.size, split.train_idx.size) == (200, 100, 700)

    def test_empty_subset_rejected(self):
        with pytest.raises(ConfigError):
            make_splits(labeled_blank(5), labeled_fraction=0.4)
        with pytest.raises(ConfigError):
            make_splits(labeled_blank(100), nn_fraction=0.6, val_fraction=0.5)

    def test_reproducible(self):
        a = make_splits(labeled_blank(200), labeled_fraction=0.5, seed=4)
        b = make_splits(labeled_blank(200), labeled_fraction=0.5, seed=4)
        assert a.to_json() == b.to_json()

    def test_unpaired_halves_are_disjoint(self):
        split = make_splits(labeled_blank(200), labeled_fraction=0.3, unpaired=True, seed=1)
        assert np.intersect1d(split.unlabeled_x_idx, split.unlabeled_y_idx).size == 0
        assert split.unlabeled_x_idx.size + split.unlabeled_y_idx.size == 140

    def test_stratified_keeps_class_balance(self):
        split = make_splits(labeled_blank(400, d_c=4), labeled_fraction=0.5, seed=2,
                            stratified=True)
        counts = np.bincount(split.labeled_idx % 4, minlength=4)
        np.testing.assert_array_equal(counts, [50, 50, 50, 50])

    def test_prefix_labels(self):
        labels = np.eye(3)[:, np.arange(30) % 3]
        data = ModalityDataset(np.zeros((2, 50)), np.zeros((2, 50)), labels, SINGLE_LABEL)
        split = make_splits(data)
        np.testing.assert_array_equal(split.labeled_idx, np.arange(30))
        np.testing.assert_array_equal(split.unlabeled_x_idx, np.arange(30, 50))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(40, 300), st.floats(0.2, 1.0), st.booleans(), st.integers(0, 99),
           st.booleans())
    def test_partition_property(self, n, frac, unpaired, seed, stratified):
        split = make_splits(labeled_blank(n), labeled_fraction=frac, unpaired=unpaired,
                            seed=seed, stratified=stratified)
        parts = np.concatenate([split.nn_idx, split.val_idx, split.train_idx])
        assert parts.size == np.unique(parts).size
        np.testing.assert_array_equal(np.sort(parts), split.labeled_idx)
        assert np.intersect1d(split.labeled_idx, split.unlabeled_idx).size == 0
        everything = np.union1d(split.labeled_idx, split.unlabeled_idx)
        np.testing.assert_array_equal(everything, np.arange(n))
        if unpaired:
            assert np.intersect1d(split.unlabeled_x_idx, split.unlabeled_y_idx).size == 0


class TestHoldout:
    def test_disjoint_and_sized(self):
        data = generate_synthetic(SyntheticSpec(d_c=10, samples_per_class=50, seed=0))
        train, test = holdout_split(data, 0.4, seed=0)
        assert (train.n_x, test.n_x) == (300, 200)
        np.testing.assert_array_equal(test.labels.sum(axis=1), np.full(10, 20))

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            holdout_split(toy_dataset(), 1.0, seed=0)
