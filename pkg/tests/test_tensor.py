import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from reportlm import nn
from reportlm import tensor as T
from reportlm.exceptions import ShapeError, ValidationError

from gradcheck import check, weighted

SEEDS = range(5)
TOL = 1e-4


def away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-2, 2, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def rand_shape(rng):
    return (int(rng.integers(1, 5)), int(rng.integers(1, 5)))


class TestForwardExamples:
    def test_matmul_identity(self):
        a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(T.tensor(np.eye(2)), a).data, a.data)

    def test_matmul_dot(self):
        out = T.matmul(T.tensor([[1.0, 2.0]]), T.tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_matmul_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))

    def test_sigmoid_tanh_at_zero(self):
        assert T.sigmoid(T.tensor(0.0)).item() == 0.5
        assert T.tanh(T.tensor(0.0)).item() == 0.0

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(T.tensor([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_broadcast_limited_to_scalars(self):
        T.add(T.tensor(np.ones((2, 3))), T.tensor(2.0))
        with pytest.raises(ShapeError):
            T.add(T.tensor(np.ones((2, 3))), T.tensor(np.ones(3)))

    def test_exp_overflow_counts_not_raises(self):
        before = T.diagnostics["exp_overflow"]
        out = T.exp(T.tensor([1000.0]))
        assert math.isinf(out.data[0])
        assert T.diagnostics["exp_overflow"] == before + 1

    def test_log_domain_counts_not_raises(self):
        before = T.diagnostics["log_domain"]
        out = T.log(T.tensor([0.0, -1.0]))
        assert out.data[0] == -np.inf and np.isnan(out.data[1])
        assert T.diagnostics["log_domain"] == before + 2  # one per offending element


class TestLosses:
    def test_uniform_logits_give_ln_v(self):
        loss = T.softmax_cross_entropy(T.tensor(np.zeros((3, 18))), [0, 5, 17])
        assert loss.item() == pytest.approx(math.log(18), abs=1e-12)
        assert round(loss.item(), 4) == 2.8904

    def test_confident_logits(self):
        loss = T.softmax_cross_entropy(T.tensor([[10.0, -10.0]]), [0]).item()
        # -log sigmoid(20)
        assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
        assert loss == pytest.approx(2.06e-9, rel=1e-2)

    def test_out_of_range_target_names_row(self):
        with pytest.raises(IndexError, match="row 1"):
            T.softmax_cross_entropy(T.tensor(np.zeros((2, 3))), [0, 3])

    def test_softmax_ce_gradient_formula(self):
        rng = np.random.default_rng(0)
        z = T.Tensor(rng.standard_normal((4, 7)), requires_grad=True)
        t = rng.integers(0, 7, 4)
        T.softmax_cross_entropy(z, t).backward()
        expected = T.softmax(z.data)
        expected[np.arange(4), t] -= 1
        np.testing.assert_allclose(z.grad, expected / 4, atol=1e-15)

    def test_masked_rows_pass_no_gradient(self):
        z = T.Tensor(np.random.default_rng(1).standard_normal((3, 4)), requires_grad=True)
        T.softmax_cross_entropy(z, [0, 1, 2], weights=[1, 0, 1]).backward()
        np.testing.assert_array_equal(z.grad[1], 0.0)

    def test_bce_half(self):
        loss = T.binary_cross_entropy(T.tensor(np.full((2, 3), 0.5)), np.array([[0, 1, 0], [1, 1, 0]]))
        assert loss.item() == pytest.approx(math.log(2), abs=1e-15)

    def test_bce_perfect_prediction(self):
        y = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert T.binary_cross_entropy(T.tensor(y), y).item() <= 2.8e-11

    def test_bce_matches_direct_evaluation(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.01, 0.99, (3, 5))
        y = rng.integers(0, 2, (3, 5)).astype(float)
        direct = sum(
            -(y[i, j] * math.log(p[i, j]) + (1 - y[i, j]) * math.log(1 - p[i, j]))
            for i in range(3) for j in range(5)
        ) / 15
        assert T.binary_cross_entropy(T.tensor(p), y).item() == pytest.approx(direct, abs=1e-12)

    def test_bce_rejects_soft_targets(self):
        with pytest.raises(ValidationError):
            T.binary_cross_entropy(T.tensor([[0.5]]), np.array([[0.3]]))

    def test_softmax_rows_sum_to_one(self):
        s = T.softmax(np.random.default_rng(3).standard_normal((6, 11)) * 30)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


class TestDropout:
    def test_rate_zero_identity(self):
        x = T.tensor(np.arange(6.0).reshape(2, 3))
        assert T.dropout(x, 0.0, True, np.random.default_rng(0)) is x

    def test_inference_identity(self):
        x = T.tensor(np.arange(6.0).reshape(2, 3))
        assert T.dropout(x, 0.7, training=False) is x

    def test_inverted_scaling_mean(self):
        out = T.dropout(T.tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(0)).data
        assert 0.98 <= out.mean() <= 1.02
        assert set(np.unique(out)) <= {0.0, 2.0}

    @pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
    def test_bad_rate(self, rate):
        with pytest.raises(ValidationError):
            T.dropout(T.tensor([1.0]), rate, True, np.random.default_rng(0))


class TestGraph:
    def test_diamond_accumulates(self):
        x = T.Tensor(np.array([[1.5, -2.0]]), requires_grad=True)
        y = T.mul(x, x)
        out = T.sum(T.add(T.tanh(x), y))
        out.backward()
        expected = (1 - np.tanh(x.data) ** 2) + 2 * x.data
        np.testing.assert_allclose(x.grad, expected, rtol=1e-14)

    def test_repeated_backward_accumulates_leaves_only(self):
        x = T.Tensor(np.array([2.0]), requires_grad=True)
        loss = T.sum(T.mul(T.mul(x, x), 3.0))
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(x.grad, [24.0])

    def test_every_tracked_ancestor_gets_grad(self):
        rng = np.random.default_rng(0)
        a = T.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        c = T.Tensor(rng.standard_normal(2), requires_grad=True)
        T.sum(T.add_bias(T.matmul(a, b), c)).backward()
        for t in (a, b, c):
            assert t.grad is not None and t.grad.shape == t.shape

    def test_no_grad_builds_no_graph(self):
        a = T.Tensor(np.ones((2, 2)), requires_grad=True)
        with T.no_grad():
            out = T.matmul(a, a)
        assert not out.requires_grad
        assert T.is_grad_enabled()

    def test_backward_needs_scalar(self):
        a = T.Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            T.mul(a, a).backward()

    def test_deterministic_replay(self):
        def run():
            rng = np.random.default_rng(11)
            w = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
            x = T.dropout(T.tensor(rng.standard_normal((5, 4))), 0.3, True, rng)
            loss = T.mean(T.tanh(T.matmul(x, w)))
            loss.backward()
            return loss.item(), w.grad.copy()

        (l1, g1), (l2, g2) = run(), run()
        assert l1 == l2
        assert g1.tobytes() == g2.tobytes()


class TestGradientChecks:
    """Central differences with h = 1e-6 on five seeded instances per operation."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((3, 2)), rng.standard_normal((2, 4))
        assert check(lambda x, y: T.sum(T.matmul(x, y)), [a, b]) < 1e-6
        assert check(weighted(T.matmul, rng), [a, b]) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul])
    def test_binary(self, op, seed):
        rng = np.random.default_rng(seed)
        shape = rand_shape(rng)
        assert check(weighted(op, rng), [rng.standard_normal(shape), rng.standard_normal(shape)]) < TOL
        # scalar-with-tensor broadcasting
        assert check(weighted(op, rng), [rng.standard_normal(shape), rng.standard_normal(())]) < TOL
        assert check(weighted(op, rng), [rng.standard_normal(()), rng.standard_normal(shape)]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("op", [T.sigmoid, T.tanh, T.exp, T.neg])
    def test_smooth_unary(self, op, seed):
        rng = np.random.default_rng(seed)
        assert check(weighted(op, rng), [rng.standard_normal(rand_shape(rng))]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu(self, seed):
        rng = np.random.default_rng(seed)
        assert check(weighted(T.relu, rng), [away_from_zero(rng, rand_shape(rng))]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_log(self, seed):
        rng = np.random.default_rng(seed)
        assert check(weighted(T.log, rng), [rng.uniform(0.2, 3.0, rand_shape(rng))]) < TOL

    def test_sigmoid_derivative_at_one(self):
        x = T.Tensor(np.array([1.0]), requires_grad=True)
        T.sum(T.sigmoid(x)).backward()
        s = 1 / (1 + math.exp(-1))
        fd = (1 / (1 + math.exp(-(1 + 1e-6))) - 1 / (1 + math.exp(-(1 - 1e-6)))) / 2e-6
        assert abs(x.grad[0] - fd) < 1e-6
        assert x.grad[0] == pytest.approx(s * (1 - s), rel=1e-12)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_reductions(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(rand_shape(rng))
        assert check(lambda t: T.mul(T.sum(t), T.sum(t)), [x]) < TOL
        assert check(lambda t: T.mul(T.mean(t), T.mean(t)), [x]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_add_bias(self, seed):
        rng = np.random.default_rng(seed)
        n, m = rand_shape(rng)
        assert check(weighted(T.add_bias, rng), [rng.standard_normal((n, m)), rng.standard_normal(m)]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_slicing(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 6))
        assert check(weighted(lambda t: t[1:3, 2:5], rng), [x]) < TOL
        assert check(weighted(lambda t: t[:, ::2], rng), [x]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("axis", [0, 1])
    def test_concat(self, seed, axis):
        rng = np.random.default_rng(seed)
        shapes = [(2, 3), (2, 3)] if axis == 0 else [(3, 2), (3, 1)]
        arrays = [rng.standard_normal(s) for s in shapes]
        assert check(weighted(lambda a, b: T.concat([a, b], axis=axis), rng), arrays) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_take_rows_with_repeats(self, seed):
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, 4, 7)
        assert check(weighted(lambda t: T.take_rows(t, idx), rng), [rng.standard_normal((4, 3))]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_segment_max(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.permutation(30).reshape(6, 5) * 0.1  # distinct values, no ties
        segments = [np.array([0, 2, 4]), np.array([1, 3]), np.array([5])]
        assert check(weighted(lambda t: T.segment_max(t, segments), rng), [x]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_dropout_fixed_mask(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 4))
        op = weighted(lambda t: T.dropout(t, 0.4, True, np.random.default_rng(seed + 100)), rng)
        assert check(op, [x]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_cross_entropy(self, seed):
        rng = np.random.default_rng(seed)
        targets = rng.integers(0, 7, 4)
        w = rng.uniform(0, 1, 4)
        assert check(lambda z: T.softmax_cross_entropy(z, targets), [rng.standard_normal((4, 7))]) < 1e-6
        assert check(lambda z: T.softmax_cross_entropy(z, targets, w), [rng.standard_normal((4, 7))]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_binary_cross_entropy(self, seed):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, (3, 5)).astype(float)
        assert check(lambda p: T.binary_cross_entropy(p, y), [rng.uniform(0.05, 0.95, (3, 5))]) < TOL
        assert check(lambda z: T.binary_cross_entropy(T.sigmoid(z), y), [rng.standard_normal((3, 5))]) < TOL

    @pytest.mark.parametrize("seed", SEEDS)
    def test_lstm_cell(self, seed):
        rng = np.random.default_rng(seed)
        B, H = 2, 3
        R = T.Tensor(rng.standard_normal((B, H)))

        def build(z, c):
            h, c2 = T.lstm_cell(z, c)
            return T.add(T.sum(T.mul(h, R)), T.sum(T.mul(c2, c2)))

        assert check(build, [rng.standard_normal((B, 4 * H)), rng.standard_normal((B, H))]) < TOL


class TestFusedLstmAgainstPrimitives:
    """The fused cell and the primitive composition are two routes to one update."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_forward_and_gradients_agree(self, seed):
        rng = np.random.default_rng(seed)
        B, D, H = 3, 4, 5
        arrays = [rng.standard_normal(s) * 0.5 for s in [(D, 4 * H), (H, 4 * H), (4 * H,), (B, D), (B, H), (B, H)]]
        R1, R2 = rng.standard_normal((B, H)), rng.standard_normal((B, H))

        def run(fused):
            ts = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
            w_x, w_h, b, x, h0, c0 = ts
            if fused:
                z = T.add_bias(T.add(T.matmul(x, w_x), T.matmul(h0, w_h)), b)
                h, c = T.lstm_cell(z, c0)
            else:
                h, c = nn.lstm_step(w_x, w_h, b, x, h0, c0)
            T.add(T.sum(T.mul(h, T.Tensor(R1))), T.sum(T.mul(c, T.Tensor(R2)))).backward()
            return h.data, c.data, [t.grad for t in ts]

        hf, cf, gf = run(True)
        hp, cp, gp = run(False)
        np.testing.assert_allclose(hf, hp, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(cf, cp, rtol=1e-12, atol=1e-14)
        for a, b in zip(gf, gp):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)

    def test_layer_uses_packed_gate_order(self):
        rng = np.random.default_rng(0)
        layer = nn.LSTMLayer(2, 3, rng, "l")
        x = rng.standard_normal((1, 2))
        out, _ = layer.forward(T.tensor(x), 1, 1)
        h, _ = nn.lstm_step(layer.w_x.data, layer.w_h.data, layer.b.data, x, np.zeros((1, 3)), np.zeros((1, 3)))
        np.testing.assert_allclose(out.data, h.data, rtol=1e-13)

    def test_parameter_count_formula(self):
        layer = nn.LSTMLayer(7, 5, np.random.default_rng(0), "l")
        assert layer.n_parameters() == sum(p.size for p in layer.params.values()) == 4 * (5 * (7 + 5) + 5)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                      elements=st.floats(-50, 50)))
    def test_sigmoid_in_unit_interval_and_symmetric(self, x):
        s = T.sigmoid(T.tensor(x)).data
        assert np.all((s >= 0) & (s <= 1))
        np.testing.assert_allclose(s + T.sigmoid(T.tensor(-x)).data, 1.0, atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)),
                      elements=st.floats(-100, 100)))
    def test_softmax_normalised(self, z):
        np.testing.assert_allclose(T.softmax(z).sum(axis=-1), 1.0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_sum_of_paths(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((2, 3))
        x = T.Tensor(a.copy(), requires_grad=True)
        T.sum(T.add(T.mul(x, 2.0), T.mul(x, x))).backward()
        np.testing.assert_allclose(x.grad, 2.0 + 2 * a, rtol=1e-13)
