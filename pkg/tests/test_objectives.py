import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trnn.backprop import finite_difference_gradient
from trnn.objectives import LossSpec, aggregate_loss, is_regularized, regularizer, step_loss


class TestStepLoss:
    def test_squared_hand_value(self):
        value, adj = step_loss(np.array([1.0, 2.0]), np.array([2.0, 0.0]))
        assert value == 2.5
        np.testing.assert_array_equal(adj, [1.0, -2.0])

    def test_squared_zero_at_target(self):
        Y = np.random.default_rng(0).standard_normal((2, 3))
        value, adj = step_loss(Y, Y.copy())
        assert value == 0.0 and not np.any(adj)

    def test_cross_entropy_uniform(self):
        Y = np.zeros((2, 2))
        Y[1, 0] = 1.0
        value, adj = step_loss(Y, np.zeros((2, 2)), "cross-entropy")
        assert value == pytest.approx(np.log(4.0), rel=1e-15)
        np.testing.assert_allclose(adj, 0.25 - Y)

    def test_cross_entropy_large_logits_stable(self):
        Y = np.array([0.0, 1.0])
        value, _ = step_loss(Y, np.array([1000.0, 0.0]), "cross-entropy")
        assert value == pytest.approx(1000.0)

    def test_cross_entropy_batched(self):
        rng = np.random.default_rng(1)
        O = rng.standard_normal((3, 2, 2))
        Y = np.zeros((3, 2, 2))
        Y[:, 0, 1] = 1.0
        total, adj = step_loss(Y, O, "cross-entropy", ndim=2)
        parts = [step_loss(Y[b], O[b], "cross-entropy") for b in range(3)]
        assert total == pytest.approx(sum(p[0] for p in parts), rel=1e-14)
        np.testing.assert_allclose(adj, np.stack([p[1] for p in parts]), rtol=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16), kind=st.sampled_from(["squared", "cross-entropy"]))
    def test_adjoint_matches_finite_difference(self, seed, kind):
        rng = np.random.default_rng(seed)
        O = rng.standard_normal((2, 3))
        Y = rng.standard_normal((2, 3))
        if kind == "cross-entropy":
            Y = np.zeros((2, 3))
            Y.flat[rng.integers(6)] = 1.0
        _, adj = step_loss(Y, O, kind)
        num = finite_difference_gradient(lambda p: step_loss(Y, p["o"], kind)[0], {"o": O})["o"]
        np.testing.assert_allclose(adj, num, rtol=1e-8, atol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        O = rng.standard_normal(5) * 10
        assert step_loss(rng.standard_normal(5), O)[0] >= 0
        assert step_loss(np.eye(5)[rng.integers(5)], O, "cross-entropy")[0] >= 0

    def test_errors(self):
        with pytest.raises(ValueError):
            step_loss(np.zeros(2), np.zeros(3))
        with pytest.raises(ValueError):
            step_loss(np.array([0.5, 0.5]), np.zeros(2), "cross-entropy")
        with pytest.raises(ValueError):
            step_loss(np.zeros(2), np.zeros(2), "hinge")


class TestAggregate:
    def test_last_only_ignores_earlier_steps(self):
        outs = [np.array([[9.0], [1.0]])]
        total, adj = aggregate_loss([np.array([0.0])], outs, LossSpec(regime="last"))
        assert total == 0.5
        np.testing.assert_array_equal(adj[0], [[0.0], [1.0]])

    def test_all_sums_steps_and_cases(self):
        rng = np.random.default_rng(2)
        outs = [rng.standard_normal((3, 2)) for _ in range(2)]
        ys = [rng.standard_normal((3, 2)) for _ in range(2)]
        total, _ = aggregate_loss(ys, outs, LossSpec(regime="all"))
        expected = sum(0.5 * np.sum((o - y) ** 2) for o, y in zip(outs, ys))
        assert total == pytest.approx(expected, rel=1e-14)

    def test_panel_all_matches_manual_sum(self):
        rng = np.random.default_rng(3)
        outs = [rng.standard_normal((2, 2)), rng.standard_normal((3, 2))]
        ys = [rng.standard_normal((2, 2)), rng.standard_normal((3, 2))]
        total, adj = aggregate_loss(ys, outs, LossSpec(regime="panel-all"))
        manual = sum(step_loss(y[t], o[t])[0] for y, o in zip(ys, outs) for t in range(len(o)))
        assert total == pytest.approx(manual, rel=1e-13)
        np.testing.assert_array_equal(adj[1], outs[1] - ys[1])

    def test_last_step_adjoint_only_at_final_step(self):
        rng = np.random.default_rng(4)
        outs = [rng.standard_normal((3, 2, 2))]
        _, adj = aggregate_loss([rng.standard_normal((2, 2))], outs, LossSpec(regime="last"))
        assert not np.any(adj[0][:2]) and np.all(adj[0][2] != 0)

    def test_panel_allows_unequal_lengths(self):
        outs = [np.zeros((2, 1)), np.zeros((4, 1))]
        total, adj = aggregate_loss([np.ones(1), np.ones(1)], outs, LossSpec(regime="panel-last"))
        assert total == 1.0
        assert adj[1].shape == (4, 1)

    def test_equal_length_regime_rejects_ragged(self):
        with pytest.raises(ValueError):
            aggregate_loss([np.ones(1)] * 2, [np.zeros((2, 1)), np.zeros((3, 1))], LossSpec(regime="last"))

    def test_single_takes_one_series(self):
        with pytest.raises(ValueError):
            aggregate_loss([np.ones((2, 1))] * 2, [np.zeros((2, 1))] * 2, LossSpec(regime="single"))

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_loss([], [], LossSpec())

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            LossSpec(kind="l1")
        with pytest.raises(ValueError):
            LossSpec(regime="some")
        with pytest.raises(ValueError):
            LossSpec(lam=-1.0)


class TestRegularizer:
    def test_value_and_gradient(self):
        mats = [np.array([[1.0, 2.0]]), np.array([[3.0]])]
        value, grads = regularizer(mats, 0.1)
        assert value == pytest.approx(1.4)
        np.testing.assert_allclose(grads[0], [[0.2, 0.4]])
        np.testing.assert_allclose(grads[1], [[0.6]])

    def test_one_by_one(self):
        value, grads = regularizer([np.array([[3.0]])], 0.01)
        assert value == pytest.approx(0.09)
        assert grads[0][0, 0] == pytest.approx(0.06)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**16), lam=st.floats(0.0, 1.0))
    def test_gradient_matches_finite_difference(self, seed, lam):
        rng = np.random.default_rng(seed)
        mats = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((3, 3))}
        _, grads = regularizer(list(mats.values()), lam)
        num = finite_difference_gradient(lambda p: regularizer([p["a"], p["b"]], lam)[0], mats)
        for g, k in zip(grads, mats):
            np.testing.assert_allclose(g, num[k], rtol=1e-8, atol=1e-8)

    def test_zero_lambda(self):
        value, grads = regularizer([np.ones((2, 2))], 0.0)
        assert value == 0.0 and not np.any(grads[0])

    @pytest.mark.parametrize(
        "name,expected",
        [("f.W1", True), ("z.U3", True), ("f.B", False), ("head.V1", False), ("head.b", False)],
    )
    def test_which_parameters(self, name, expected):
        assert is_regularized(name) is expected
