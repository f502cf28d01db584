import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from reportlm.baselines import (
    SWEEP_COLUMNS,
    LinearSVM,
    LogisticRegression,
    MLPClassifier,
    MultinomialNaiveBayes,
    align_embeddings,
    load_embeddings,
    predict_scores,
    sweep,
    train_logistic,
    train_mlp,
    train_naive_bayes,
    train_svm,
)
from reportlm.corpus import PRESET_SCHEMAS
from reportlm.exceptions import NotTrainedError, ShapeError, ValidationError

COUNTS = np.array([[2, 0], [1, 1], [0, 2], [0, 1]], dtype=float)
LABELS = np.array([1, 1, 0, 0])


def blobs(seed, n=60, d=4):
    rng = np.random.default_rng(seed)
    y = np.r_[np.zeros(n // 2), np.ones(n - n // 2)].astype(int)
    X = rng.standard_normal((n, d)) * 0.5
    X[:, 0] += np.where(y == 1, 2.0, -2.0)
    return X, y


class TestNaiveBayes:
    def test_hand_computed_posterior(self):
        nb = train_naive_bayes(COUNTS, LABELS, alpha=1.0)
        # positive: (3+1, 1+1)/6, negative: (0+1, 3+1)/5, equal priors
        np.testing.assert_allclose(np.exp(nb.feature_log_prob_[0]), [[1 / 5, 4 / 5], [4 / 6, 2 / 6]])
        assert nb.predict_scores([[1, 0]])[0, 0] == pytest.approx(10 / 13)
        assert nb.predict_scores([[0, 1]])[0, 0] == pytest.approx((1 / 3) / (1 / 3 + 4 / 5))

    def test_single_class_training(self):
        nb = train_naive_bayes(COUNTS, np.ones(4))
        np.testing.assert_allclose(nb.predict_scores(COUNTS), 1.0)

    def test_huge_alpha_gives_prior(self):
        nb = train_naive_bayes(COUNTS, [1, 0, 0, 0], alpha=1e9)
        np.testing.assert_allclose(nb.predict_scores(COUNTS), 0.25, atol=1e-6)

    def test_negative_features_rejected(self):
        with pytest.raises(ValidationError, match="raw counts"):
            train_naive_bayes(-COUNTS, LABELS)

    def test_sparse_equals_dense(self):
        a = train_naive_bayes(COUNTS, LABELS).predict_scores(COUNTS)
        b = train_naive_bayes(sp.csr_matrix(COUNTS), LABELS).predict_scores(sp.csr_matrix(COUNTS))
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_counts_round_trip(self):
        nb = train_naive_bayes(COUNTS, LABELS)
        other = MultinomialNaiveBayes().set_counts(nb.feature_count_, nb.class_count_)
        np.testing.assert_array_equal(other.predict_scores(COUNTS), nb.predict_scores(COUNTS))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_label_swap_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.integers(0, 4, size=(8, 5)).astype(float)
        y = rng.integers(0, 2, size=8)
        p = train_naive_bayes(X, y).predict_scores(X)
        q = train_naive_bayes(X, 1 - y).predict_scores(X)
        np.testing.assert_allclose(p + q, 1.0, atol=1e-12)

    def test_multilabel_columns_independent(self):
        Y = np.c_[LABELS, 1 - LABELS]
        both = train_naive_bayes(COUNTS, Y).predict_scores(COUNTS)
        first = train_naive_bayes(COUNTS, LABELS).predict_scores(COUNTS)
        np.testing.assert_allclose(both[:, :1], first)


class TestLogistic:
    def test_untrained_weights_give_half(self):
        m = train_logistic(COUNTS, LABELS, epochs=0)
        np.testing.assert_array_equal(m.predict_scores(COUNTS), 0.5)
        assert m.loss_curve_ == [pytest.approx(np.log(2.0))]

    def test_first_step_matches_hand_gradient(self):
        m = train_logistic(COUNTS, LABELS, lr=0.5, epochs=1)
        # at w=0, grad = X^T (0.5 - y) / n
        g = COUNTS.T @ (0.5 - LABELS) / 4
        np.testing.assert_allclose(m.coef_[0], -0.5 * g)
        assert m.intercept_[0] == pytest.approx(-0.5 * np.mean(0.5 - LABELS))

    def test_separable_within_200_epochs(self):
        X, y = blobs(0)
        m = train_logistic(X, y, lr=0.5, epochs=200)
        assert np.mean(m.predict(X)[:, 0] == y) == 1.0

    def test_loss_monotone_at_small_step(self):
        X, y = blobs(1)
        curve = train_logistic(X, y, lr=1e-3, epochs=300, l2=0.01).loss_curve_
        assert all(b <= a + 1e-15 for a, b in zip(curve, curve[1:]))

    def test_not_trained(self):
        with pytest.raises(NotTrainedError):
            LogisticRegression().predict_scores(COUNTS)

    def test_width_checked(self):
        m = train_logistic(COUNTS, LABELS, epochs=5)
        with pytest.raises(ShapeError):
            m.predict_scores(np.ones((2, 3)))


class TestSVM:
    def test_zero_weights_hinge_one(self):
        m = train_svm(COUNTS, LABELS, epochs=0)
        assert m.loss_curve_ == [1.0]
        np.testing.assert_array_equal(m.predict_scores(COUNTS), 0.0)

    def test_separable_margins(self):
        X, y = blobs(2)
        m = train_svm(X, y, lr=0.5, epochs=3000, C=100.0, decay=0.01)
        assert m.margins(X, y).min() >= 1 - 1e-3
        assert np.all(m.predict(X)[:, 0] == y)

    def test_loss_monotone_at_small_step(self):
        X, y = blobs(3)
        curve = train_svm(X, y, lr=1e-3, epochs=200).loss_curve_
        assert all(b <= a + 1e-12 for a, b in zip(curve, curve[1:]))

    def test_bad_C(self):
        with pytest.raises(ValidationError):
            train_svm(COUNTS, LABELS, C=0.0)


class TestMLP:
    def test_zero_init_gives_half(self):
        m = MLPClassifier(hidden_sizes=(8,)).initialize(2, 3)
        np.testing.assert_array_equal(m.predict_scores(COUNTS), 0.5)

    def test_learns_xor(self):
        X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
        y = np.array([0, 1, 1, 0])
        for seed in range(3):
            m = MLPClassifier(hidden_sizes=(16,), lr=0.05, epochs=2000, batch_size=None, dropout=0.0, l2=0.0,
                              seed=seed).fit(X, y)
            assert np.all(m.predict(X)[:, 0] == y)

    def test_deterministic(self):
        X, y = blobs(4, n=20)
        cfg = dict(hidden_sizes=(6,), epochs=5, batch_size=4)
        a = MLPClassifier(**cfg).fit(X, y)
        b = MLPClassifier(**cfg).fit(X, y)
        assert a.loss_curve_ == b.loss_curve_
        assert np.array_equal(a.predict_scores(X), b.predict_scores(X))

    def test_dropout_off_at_inference(self):
        X, y = blobs(5, n=20)
        m = MLPClassifier(hidden_sizes=(6,), epochs=3, dropout=0.5).fit(X, y)
        assert np.array_equal(m.predict_scores(X), m.predict_scores(X))

    def test_schema_width_mismatch(self):
        X, y = blobs(6, n=10)
        with pytest.raises(ShapeError):
            train_mlp(X, y, schema=PRESET_SCHEMAS["hemorrhage"])

    def test_default_architecture(self):
        m = MLPClassifier().initialize(10, 5)
        assert m.layer_sizes == [10, 512, 256, 128, 5]

    def test_arrays_round_trip(self):
        X, y = blobs(7, n=10)
        a = train_mlp(X, y, config={"hidden_sizes": (4,), "epochs": 2})
        b = MLPClassifier(hidden_sizes=(4,), seed=99).initialize(4, 1)
        b.set_arrays(a.get_arrays())
        assert np.array_equal(predict_scores(a, X), predict_scores(b, X))


class TestEmbeddings:
    def write(self, path, rows):
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        return path

    def test_load_and_align(self, tmp_path):
        p = self.write(tmp_path / "e.jsonl", [{"id": "a", "vector": [1, 2]}, {"id": "b", "vector": [3, 4]}])
        ids, M = load_embeddings(p)
        assert ids == ["a", "b"]
        np.testing.assert_array_equal(align_embeddings(ids, M, ["b", "a"]), [[3, 4], [1, 2]])
        with pytest.raises(ValidationError, match="no embedding"):
            align_embeddings(ids, M, ["c"])

    def test_dimension_mismatch(self, tmp_path):
        p = self.write(tmp_path / "e.jsonl", [{"id": "a", "vector": [1, 2]}, {"id": "b", "vector": [3]}])
        with pytest.raises(ShapeError, match="dimension"):
            load_embeddings(p)

    def test_duplicate_and_nonfinite(self, tmp_path):
        p = self.write(tmp_path / "d.jsonl", [{"id": "a", "vector": [1]}, {"id": "a", "vector": [2]}])
        with pytest.raises(ValidationError, match="duplicate"):
            load_embeddings(p)
        p = tmp_path / "n.jsonl"
        p.write_text('{"id": "a", "vector": [NaN]}\n')
        with pytest.raises(ValidationError, match="non-finite"):
            load_embeddings(p)


class TestSweep:
    def test_rows_and_error_note(self):
        X, y = blobs(8)
        order = np.random.default_rng(0).permutation(len(y))
        X, y = X[order], y[order]
        Xs = {"dense": (X[:40], X[40:]), "counts": (np.abs(X[:40]), np.abs(X[40:]))}
        rows, fitted = sweep(Xs, y[:40], y[40:], ["c"], models=["naive_bayes", "logistic", "svm"],
                             params={"logistic": {"epochs": 50}, "svm": {"epochs": 50}})
        assert [tuple(r) for r in rows] == [SWEEP_COLUMNS] * 6
        nb_dense = rows[0]
        assert nb_dense["micro_auc"] is None and "non-negative" in nb_dense["note"]
        assert rows[2]["micro_auc"] > 0.9
        assert ("naive_bayes", "dense") not in fitted and ("svm", "counts") in fitted

    def test_unknown_model(self):
        with pytest.raises(ValidationError):
            sweep({"x": (COUNTS, COUNTS)}, LABELS, LABELS, ["c"], models=["forest"])
