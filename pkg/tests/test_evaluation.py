"""RMSE, top-K retrieval accuracy, confusion statistics, and the MNB baseline."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poirec.evaluation import (
    ConfusionMatrix,
    EmptyInput,
    LengthMismatch,
    confusion_matrix,
    mnb_predict,
    mnb_train,
    rmse,
    top_k_accuracy,
    top_k_hits,
)
from poirec.features import CandidateFeatures, FeatureConfig, FeatureSpace, QueryFeatures
from poirec.model import init_params, score_all


class TestRmse:
    def test_hand_values(self):
        # errors 1 and -2: sqrt((1+4)/2)
        assert rmse([(2.0, 1.0), (3.0, 5.0)]) == pytest.approx(math.sqrt(2.5))

    def test_perfect_predictions(self):
        assert rmse([(4.0, 4.0), (1.5, 1.5)]) == 0.0

    def test_empty_raises(self):
        with pytest.raises(EmptyInput):
            rmse([])

    @given(
        st.lists(
            st.tuples(
                st.floats(-10, 10, allow_nan=False), st.floats(-10, 10, allow_nan=False)
            ),
            min_size=1,
            max_size=30,
        )
    )
    def test_matches_brute_force(self, pairs):
        want = math.sqrt(sum((p - y) ** 2 for p, y in pairs) / len(pairs))
        assert rmse(pairs) == pytest.approx(want, abs=1e-9)

    @given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=20))
    def test_nonnegative(self, ys):
        assert rmse([(y + 0.3, y) for y in ys]) >= 0.0


class TestTopK:
    def setup_method(self):
        self.params = init_params(seed=4, num_users=8, num_businesses=10, k=4, text_buckets=16)
        self.space = None
        rng = np.random.default_rng(4)
        self.queries = [
            QueryFeatures(int(rng.integers(0, 8)), tuple(rng.uniform(-1, 1, 3)))
            for _ in range(12)
        ]
        self.cands = [CandidateFeatures(i, {int(i % 16): 1}) for i in range(10)]
        self.true = [int(rng.integers(0, 10)) for _ in range(12)]

    def test_matches_full_sort_oracle(self):
        for k in (1, 3, 10):
            got = top_k_accuracy(self.queries, self.true, self.cands, self.params, k)
            hits = 0
            for q, t in zip(self.queries, self.true):
                scores = score_all(q, self.cands, self.params)
                order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
                hits += t in order[:k]
            assert got == pytest.approx(hits / len(self.queries))

    def test_monotone_in_k(self):
        accs = [
            top_k_accuracy(self.queries, self.true, self.cands, self.params, k)
            for k in range(1, 11)
        ]
        assert all(a <= b for a, b in zip(accs, accs[1:]))
        assert accs[-1] == 1.0  # K = corpus size always hits

    def test_tie_break_prefers_lowest_index(self):
        # two identical candidates: only the first can be "in" the top-1
        scores = np.array([1.0, 1.0, 0.0])
        assert top_k_hits(scores, 0, 1)
        assert not top_k_hits(scores, 1, 1)

    def test_k_one_is_argmax(self):
        scores = np.array([0.1, 0.9, 0.3])
        assert top_k_hits(scores, 1, 1)
        assert not top_k_hits(scores, 0, 1)


class TestConfusion:
    def test_identity_predictions(self):
        cm = confusion_matrix([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
        assert cm.accuracy == 1.0
        assert np.array_equal(cm.counts, np.eye(5, dtype=np.int64))
        for s in cm.per_class:
            assert (s.precision, s.recall, s.f1) == (1.0, 1.0, 1.0)

    def test_hand_worked_counts(self):
        true = [1, 1, 2, 2, 2]
        pred = [1, 2, 2, 2, 1]
        cm = confusion_matrix(true, pred)
        assert cm.counts[0, 0] == 1 and cm.counts[0, 1] == 1
        assert cm.counts[1, 1] == 2 and cm.counts[1, 0] == 1
        c1, c2 = cm.per_class[0], cm.per_class[1]
        assert c1.precision == pytest.approx(1 / 2)
        assert c1.recall == pytest.approx(1 / 2)
        assert c2.precision == pytest.approx(2 / 3)
        assert c2.recall == pytest.approx(2 / 3)
        assert c2.f1 == pytest.approx(2 / 3)

    def test_micro_equals_accuracy(self):
        rng = np.random.default_rng(0)
        true = list(rng.integers(1, 6, 100))
        pred = list(rng.integers(1, 6, 100))
        cm = confusion_matrix(true, pred)
        assert cm.micro.precision == pytest.approx(cm.accuracy)
        assert cm.micro.recall == pytest.approx(cm.accuracy)
        assert cm.micro.f1 == pytest.approx(cm.accuracy)

    def test_weighted_recall_equals_accuracy(self):
        rng = np.random.default_rng(1)
        true = list(rng.integers(1, 6, 80))
        pred = list(rng.integers(1, 6, 80))
        cm = confusion_matrix(true, pred)
        assert cm.weighted.recall == pytest.approx(cm.accuracy)

    def test_never_predicted_class_has_zero_precision(self):
        cm = confusion_matrix([5, 5, 5], [4, 4, 4])
        assert cm.per_class[4].precision == 0.0
        assert cm.per_class[4].recall == 0.0
        assert cm.per_class[4].f1 == 0.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            confusion_matrix([1, 2], [1])

    def test_out_of_range_star(self):
        with pytest.raises(ValueError):
            confusion_matrix([0], [1])

    def test_table_renders(self):
        cm = confusion_matrix([1, 2, 3], [1, 2, 2])
        text = cm.table()
        assert "precision" in text and "macro average" in text
        assert len(text.splitlines()) == 9  # header + 5 classes + 3 averages

    @given(
        st.lists(st.tuples(st.integers(1, 5), st.integers(1, 5)), min_size=1, max_size=60)
    )
    @settings(max_examples=50)
    def test_support_and_count_invariants(self, pairs):
        true = [t for t, _ in pairs]
        pred = [p for _, p in pairs]
        cm = confusion_matrix(true, pred)
        assert cm.total == len(pairs)
        assert sum(s.support for s in cm.per_class) == len(pairs)
        assert np.trace(cm.counts) == sum(t == p for t, p in pairs)


class TestMnb:
    def test_hand_computed_laplace(self):
        """One doc per class over a 2-bucket vocabulary, checked by hand."""
        docs = [({0: 2}, 1), ({1: 1}, 5)]
        model = mnb_train(docs, alpha=1.0, vocab_size=2)
        assert model.classes == [1, 5]
        # class 1: counts [2, 0], total 2 -> p(bucket0) = (2+1)/(2+2) = 3/4
        assert model.log_likelihood[0, 0] == pytest.approx(math.log(3 / 4))
        assert model.log_likelihood[0, 1] == pytest.approx(math.log(1 / 4))
        # class 5: counts [0, 1], total 1 -> p(bucket0) = 1/3
        assert model.log_likelihood[1, 0] == pytest.approx(math.log(1 / 3))
        assert model.log_likelihood[1, 1] == pytest.approx(math.log(2 / 3))
        assert model.log_prior[0] == pytest.approx(math.log(0.5))

    def test_predicts_the_obvious_class(self):
        docs = [({0: 3}, 2)] * 4 + [({1: 3}, 4)] * 4
        model = mnb_train(docs, vocab_size=2)
        assert mnb_predict(model, {0: 5}) == 2
        assert mnb_predict(model, {1: 5}) == 4

    def test_empty_document_uses_prior_only(self):
        docs = [({0: 1}, 3)] * 3 + [({1: 1}, 5)]
        model = mnb_train(docs, vocab_size=2)
        assert mnb_predict(model, {}) == 3  # majority-class prior wins

    def test_tie_resolves_to_lowest_class(self):
        # symmetric classes, symmetric document: scores tie exactly
        docs = [({0: 1}, 2), ({0: 1}, 4)]
        model = mnb_train(docs, vocab_size=1)
        assert mnb_predict(model, {0: 1}) == 2

    def test_large_alpha_limit_is_prior_only(self):
        """As alpha grows, likelihoods flatten and the prior decides."""
        docs = [({0: 50}, 1)] + [({1: 1}, 5)] * 9
        model = mnb_train(docs, alpha=1e9, vocab_size=2)
        assert mnb_predict(model, {0: 3}) == 5

    def test_no_documents_raises(self):
        with pytest.raises(EmptyInput):
            mnb_train([])

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            mnb_train([({0: 1}, 1)], alpha=0.0)
