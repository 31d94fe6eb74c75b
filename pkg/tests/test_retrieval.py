import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sscmr.dataset import MULTI_LABEL, SINGLE_LABEL
from sscmr.errors import ConfigError, ValidationError
from sscmr.retrieval import (RetrievalRun, average_precision, evaluate, format_table,
                             map_report, rank, relevance, similarity)


def brute_force_map(query_reps, db_reps, query_labels, db_labels, cutoff):
    """From-scratch MAP: explicit cosine, explicit sort, explicit precision sums."""
    n_q, n_db = query_reps.shape[1], db_reps.shape[1]
    aps = []
    for q in range(n_q):
        scores = []
        for d in range(n_db):
            a, b = query_reps[:, q], db_reps[:, d]
            scores.append((-(a @ b) / (np.sqrt(a @ a) * np.sqrt(b @ b)), d))
        ranked = [d for _, d in sorted(scores)]
        r = n_db if cutoff is None else min(cutoff, n_db)
        hits, precision_sum = 0, 0.0
        for k in range(r):
            d = ranked[k]
            if int(query_labels[:, q] @ db_labels[:, d]) >= 1:
                hits += 1
                precision_sum += hits / (k + 1)
        aps.append(precision_sum / hits if hits else 0.0)
    return sum(aps) / len(aps)


class TestRank:
    def test_toy_order(self):
        q = np.array([[1.0], [0.0]])
        db = np.array([[1.0, 0.0, 0.6], [0.0, 1.0, 0.8]])
        np.testing.assert_array_equal(rank(q, db)[0], [0, 2, 1])

    def test_identical_item_first(self):
        rng = np.random.default_rng(0)
        db = rng.normal(size=(4, 10))
        assert rank(db[:, [6]], db)[0, 0] == 6

    def test_ties_by_index(self):
        db = np.array([[1.0, 2.0, 1.0, 3.0], [0.0, 0.0, 0.0, 0.0]])
        np.testing.assert_array_equal(rank(np.array([[1.0], [0.0]]), db)[0], [0, 1, 2, 3])

    def test_database_permutation(self):
        rng = np.random.default_rng(1)
        q, db = rng.normal(size=(5, 3)), rng.normal(size=(5, 12))
        perm = rng.permutation(12)
        np.testing.assert_array_equal(perm[rank(q, db[:, perm])], rank(q, db))

    def test_zero_vector_falls_back_to_dot(self, caplog):
        q = np.array([[0.0], [0.0]])
        db = np.array([[1.0, 2.0], [0.0, 1.0]])
        with caplog.at_level(logging.WARNING):
            s = similarity(q, db)
        np.testing.assert_array_equal(s, [[0.0, 0.0]])
        assert "zero-norm" in caplog.text

    def test_other_metrics(self):
        q = np.array([[1.0], [0.0]])
        db = np.array([[2.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(similarity(q, db, "dot"), [[2.0, 0.0]])
        np.testing.assert_allclose(similarity(q, db, "euclidean"), [[-1.0, -np.sqrt(2)]])
        with pytest.raises(ConfigError):
            similarity(q, db, "manhattan")

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            rank(np.zeros((2, 1)), np.zeros((3, 1)))


class TestRelevance:
    def test_identical(self):
        assert relevance([1, 0, 1], [1, 0, 1], MULTI_LABEL)[0, 0] == 1
        assert relevance([0, 1], [0, 1], SINGLE_LABEL)[0, 0] == 1

    def test_shared_concept(self):
        assert relevance([1, 1, 0], [0, 1, 1], MULTI_LABEL)[0, 0] == 1
        assert relevance([1, 0, 0], [0, 1, 1], MULTI_LABEL)[0, 0] == 0

    def test_mode_mismatch(self):
        with pytest.raises(ValidationError):
            relevance([1, 1, 0], [0, 1, 0], SINGLE_LABEL)
        with pytest.raises(ValidationError):
            relevance([1, 0], [1, 0, 0], MULTI_LABEL)
        with pytest.raises(ValidationError):
            relevance([1, 0], [1, 0], "ranked")


class TestAveragePrecision:
    def test_worked_example(self):
        assert average_precision([1, 0, 1], 3) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)

    def test_all_relevant(self):
        assert average_precision([1, 1, 1, 1]) == 1.0

    def test_no_relevant(self):
        assert average_precision([0, 0, 0]) == 0.0
        assert average_precision([0, 0, 1], 2) == 0.0

    def test_empty(self):
        with pytest.raises(ValidationError):
            average_precision([])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=2, max_size=30), st.data())
    def test_swapping_relevant_down_never_helps(self, bits, data):
        pos = [i for i in range(len(bits) - 1) if bits[i] == 1 and bits[i + 1] == 0]
        if not pos:
            return
        i = data.draw(st.sampled_from(pos))
        worse = list(bits)
        worse[i], worse[i + 1] = 0, 1
        assert average_precision(worse) <= average_precision(bits)


class TestMapReport:
    def run_from_aps(self, rel_rows):
        rel = np.array(rel_rows)
        return RetrievalRun("I-Q", np.tile(np.arange(rel.shape[1]), (rel.shape[0], 1)), rel)

    def test_single_query(self):
        run = self.run_from_aps([[1, 0, 1]])
        assert map_report({"I-Q": run}, [3])["I-Q"]["3"] == pytest.approx(5 / 6)

    def test_two_queries(self):
        run = self.run_from_aps([[1, 1, 0, 0], [0, 1, 0, 0]])
        assert map_report({"I-Q": run}, [None])["I-Q"]["all"] == 0.75

    def test_average_of_directions(self):
        a = self.run_from_aps([[1, 0]])
        b = self.run_from_aps([[0, 1]])
        report = map_report({"I-Q": a, "T-Q": b}, [None])
        assert report["Avg"]["all"] == 0.75

    def test_no_queries(self):
        with pytest.raises(ValidationError):
            self.run_from_aps(np.zeros((0, 3))).map_at()
        with pytest.raises(ValidationError):
            map_report({})

    def test_query_permutation(self):
        rng = np.random.default_rng(2)
        rx, ry = rng.normal(size=(4, 15)), rng.normal(size=(4, 15))
        labels = np.eye(4)[:, rng.integers(0, 4, size=15)]
        perm = rng.permutation(15)
        run = RetrievalRun.build("I-Q", rx, ry, labels, labels, SINGLE_LABEL)
        run_p = RetrievalRun.build("I-Q", rx[:, perm], ry, labels[:, perm], labels, SINGLE_LABEL)
        assert run.map_at() == pytest.approx(run_p.map_at(), abs=1e-15)

    def test_small_database_cutoff_irrelevant(self):
        rng = np.random.default_rng(3)
        rx, ry = rng.normal(size=(5, 30)), rng.normal(size=(5, 30))
        labels = (rng.random((5, 30)) < 0.3).astype(float)
        labels[0, labels.sum(axis=0) == 0] = 1
        report = evaluate(rx, ry, labels, MULTI_LABEL)
        for key in ("I-Q", "T-Q", "Avg"):
            assert report[key]["50"] == report[key]["all"]

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            n_db, n_q, d = rng.integers(2, 21), rng.integers(1, 11), rng.integers(2, 6)
            q, db = rng.normal(size=(d, n_q)), rng.normal(size=(d, n_db))
            lq = (rng.random((4, n_q)) < 0.4).astype(float)
            ldb = (rng.random((4, n_db)) < 0.4).astype(float)
            lq[0, lq.sum(axis=0) == 0] = 1
            ldb[1, ldb.sum(axis=0) == 0] = 1
            cutoff = int(rng.integers(1, 25))
            run = RetrievalRun.build("I-Q", q, db, lq, ldb, MULTI_LABEL)
            report = map_report({"I-Q": run}, [cutoff, None])
            assert abs(report["I-Q"][str(cutoff)] - brute_force_map(q, db, lq, ldb, cutoff)) < 1e-12
            assert abs(report["I-Q"]["all"] - brute_force_map(q, db, lq, ldb, None)) < 1e-12

    def test_random_ranking_baseline(self):
        values = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            labels = np.eye(5)[:, np.arange(100) % 5]
            run = RetrievalRun.build("I-Q", rng.normal(size=(8, 20)), rng.normal(size=(8, 100)),
                                     labels[:, :20], labels, SINGLE_LABEL)
            values.append(run.map_at())
        assert abs(np.mean(values) - 0.2) <= 0.05

    def test_table(self):
        run = self.run_from_aps([[1, 0]])
        text = format_table(map_report({"I-Q": run, "T-Q": run}, [50, None]))
        assert "R=50 T-Q" in text and "1.000" in text
