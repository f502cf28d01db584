import math

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from reportlm import tensor as T
from reportlm.exceptions import NotTrainedError, ValidationError
from reportlm.langmodel import METRICS_COLUMNS, LanguageModel, count_parameters, write_metrics_csv
from reportlm.synthetic import alternating_corpus


def random_sequences(V, n=16, length=12, seed=0):
    rng = np.random.default_rng(seed)
    return [list(rng.integers(0, V, size=length)) for _ in range(n)]


def tiny(seed=0, **kw):
    cfg = dict(vocab_size=7, embedding_dim=3, hidden_dim=4, num_layers=2, dropout=0.0, seed=seed)
    cfg.update(kw)
    return LanguageModel(**cfg).initialize()


def fwd_outputs(model, seq):
    idx = np.asarray(seq)[:, None]
    with T.no_grad():
        out, _ = model._run_stack("fwd", idx, False, None)
    return out.data


def bwd_outputs(model, seq):
    idx = np.asarray(seq[::-1])[:, None]
    with T.no_grad():
        out, _ = model._run_stack("bwd", idx, False, None)
    return out.data[::-1]


class TestLossAnchors:
    @pytest.mark.parametrize("V", [18, 2000])
    def test_initial_loss_is_log_vocab(self, V):
        model = LanguageModel(vocab_size=V, embedding_dim=16, hidden_dim=16, num_layers=1, seed=1).initialize()
        loss = model.evaluate(random_sequences(V))["loss"]
        assert abs(loss - math.log(V)) / math.log(V) < 0.02

    def test_memorizes_alternating_corpus(self):
        X = alternating_corpus()
        model = LanguageModel(vocab_size=18, embedding_dim=16, hidden_dim=16, num_layers=1, dropout=0.0,
                              epochs=50, learning_rate=1e-2, batch_size=8).fit(X)
        ev = model.evaluate(X)
        assert ev["top1_accuracy"] == 1.0
        assert ev["loss"] < 0.01


class TestGradient:
    @pytest.mark.parametrize("seed", range(5))
    def test_six_token_loss_matches_finite_differences(self, seed):
        model = tiny(seed)
        seq = [list(np.random.default_rng(seed + 100).integers(0, 7, size=6))]
        params = model.named_parameters()
        model.loss(seq).backward()
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params.values()]

        arrays = [p.data for p in params.values()]

        def f(*_):
            with T.no_grad():
                return model.loss(seq).item()

        numeric = numeric_grad(f, arrays)
        err = rel_error(np.concatenate([a.ravel() for a in analytic]),
                        np.concatenate([n.ravel() for n in numeric]))
        assert err < 1e-4

    def test_loss_equals_evaluate_when_one_window(self):
        model = tiny(3, bptt=64)
        seqs = random_sequences(7, n=4, length=9, seed=3)
        with T.no_grad():
            graph = model.loss(seqs).item()
        assert graph == pytest.approx(model.evaluate(seqs)["loss"], rel=1e-12)


class TestStructure:
    def test_forward_direction_is_causal(self):
        model = tiny(4)
        seq = [1, 2, 3, 4, 5, 6, 0, 1]
        changed = seq[:5] + [6, 6, 6]
        np.testing.assert_array_equal(fwd_outputs(model, seq)[:5], fwd_outputs(model, changed)[:5])
        assert not np.allclose(fwd_outputs(model, seq)[5:], fwd_outputs(model, changed)[5:])

    def test_backward_direction_is_anticausal(self):
        model = tiny(5)
        seq = [1, 2, 3, 4, 5, 6, 0, 1]
        changed = [6, 6, 6] + seq[3:]
        np.testing.assert_array_equal(bwd_outputs(model, seq)[3:], bwd_outputs(model, changed)[3:])

    def test_directions_share_only_embedding(self):
        model = tiny(6)
        seq = [1, 2, 3, 4]
        before = fwd_outputs(model, seq)
        for name, p in model.named_parameters().items():
            if name.startswith("bwd."):
                p.data = p.data + 1.0
        np.testing.assert_array_equal(fwd_outputs(model, seq), before)

    def test_parameter_count(self):
        model = tiny(0)
        V, E, H = 7, 3, 4
        expected = V * E + 2 * (4 * H * (E + H + 1) + 4 * H * (H + H + 1) + H * V + V)
        assert count_parameters(model) == sum(p.size for p in model.named_parameters().values())
        assert count_parameters(model) == expected

    def test_untrained_model(self):
        with pytest.raises(NotTrainedError):
            LanguageModel().transform([[1, 2]])

    def test_bad_config(self):
        with pytest.raises(ValidationError):
            LanguageModel(pooling="sum").initialize()
        with pytest.raises(ValidationError):
            LanguageModel(vocab_size=5).fit([[1, 9]])


class TestEncoding:
    @pytest.mark.parametrize("pooling", ["mean", "last", "max"])
    def test_batched_transform_preserves_order(self, pooling):
        model = tiny(7, pooling=pooling)
        seqs = [[1, 2], [3, 4, 5, 6, 1], [2], [0, 1, 2, 3]]
        batched = model.transform(seqs, batch_size=3)
        assert batched.shape == (4, 8)
        for i, s in enumerate(seqs):
            np.testing.assert_allclose(batched[i], model.encode_document(s), atol=1e-12)

    def test_mean_pooling_by_hand(self):
        model = tiny(8)
        seq = [1, 2, 3]
        expected = np.r_[fwd_outputs(model, seq).mean(axis=0), bwd_outputs(model, seq).mean(axis=0)]
        np.testing.assert_allclose(model.encode_document(seq), expected, atol=1e-12)

    def test_order_sensitive(self):
        model = tiny(9)
        a = model.encode_document([1, 2, 3, 4, 5])
        b = model.encode_document([4, 5, 1, 2, 3])
        assert not np.allclose(a, b)

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValidationError, match="sequence 1"):
            tiny().transform([[1], []])

    def test_predict_next_is_distribution(self):
        p = tiny(10).predict_next([1, 2, 3])
        assert p.shape == (7,) and p.sum() == pytest.approx(1.0)


class TestTraining:
    def test_deterministic(self):
        X = random_sequences(10, n=8, length=10)
        cfg = dict(vocab_size=10, embedding_dim=4, hidden_dim=4, num_layers=1, epochs=2, dropout=0.2, bptt=4)
        a, b = LanguageModel(**cfg).fit(X), LanguageModel(**cfg).fit(X)
        assert a.parameter_hash() == b.parameter_hash()
        assert [r["loss"] for r in a.history_] == [r["loss"] for r in b.history_]

    def test_resume_matches_uninterrupted(self):
        X = random_sequences(10, n=8, length=10, seed=1)
        cfg = dict(vocab_size=10, embedding_dim=4, hidden_dim=4, num_layers=1, dropout=0.2, bptt=4)
        full = LanguageModel(epochs=3, **cfg).fit(X)
        part = LanguageModel(epochs=1, **cfg).fit(X)
        resumed = LanguageModel(epochs=3, **cfg).fit(X, resume_from=part.checkpoint_state())
        assert resumed.parameter_hash() == full.parameter_hash()
        assert resumed.history_ == [dict(r, elapsed_seconds=resumed.history_[i]["elapsed_seconds"])
                                    for i, r in enumerate(full.history_)]

    def test_restores_best_validation_weights(self):
        X = random_sequences(10, n=8, length=10, seed=2)
        V = random_sequences(10, n=4, length=10, seed=3)
        m = LanguageModel(vocab_size=10, embedding_dim=4, hidden_dim=4, num_layers=1, epochs=3).fit(X, validation=V)
        best = min(r["loss"] for r in m.history_ if r["split"] == "valid")
        assert m.best_validation_loss_ == best
        assert m.evaluate(V)["loss"] == pytest.approx(best, rel=1e-12)

    def test_metrics_csv_timing_blanked(self, tmp_path):
        X = random_sequences(10, n=4, length=6)
        m = LanguageModel(vocab_size=10, embedding_dim=4, hidden_dim=4, num_layers=1, epochs=2).fit(X)
        write_metrics_csv(m.history_, tmp_path / "m.csv", timing=False)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == ",".join(METRICS_COLUMNS)
        assert all(line.endswith(",") for line in lines[1:])

    def test_length_one_documents_skipped(self):
        m = LanguageModel(vocab_size=10, embedding_dim=4, hidden_dim=4, num_layers=1, epochs=1).fit([[1], [1, 2, 3]])
        assert m.n_skipped_ == 1
        with pytest.raises(ValidationError):
            LanguageModel(vocab_size=10).fit([[1], [2]])
