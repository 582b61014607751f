"""Engine tests: forward values, backward gradients, finite-difference checks."""

import math

import numpy as np
import pytest

import mopq.autograd as ag
from mopq.errors import NumericError, ShapeError, UsageError


class TestForwardValues:
    def test_constant_identity(self):
        node = ag.constant(5.0)
        assert node.value == 5.0

    def test_matmul_identity(self):
        x = ag.constant([1.0, 2.0])
        eye = ag.constant(np.eye(2))
        out = ag.matmul(x, eye)
        np.testing.assert_array_equal(out.value, [1.0, 2.0])

    def test_tanh_scalar(self):
        out = ag.tanh(ag.constant(0.5))
        assert out.value == pytest.approx(math.tanh(0.5), abs=1e-12)
        assert out.value == pytest.approx(0.462117, abs=1e-6)

    def test_shape_mismatch_names_node(self):
        a = ag.input_node("left", np.ones((2, 3)))
        b = ag.input_node("right", np.ones((2, 3)))
        with pytest.raises(ShapeError, match="left"):
            ag.matmul(a, b)

    def test_row_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        s = ag.row_softmax(ag.constant(rng.normal(size=(5, 7))))
        np.testing.assert_allclose(s.value.sum(axis=1), 1.0, atol=1e-12)


class TestForwardEval:
    def test_reevaluation_is_bit_identical(self):
        x = ag.input_node("x", np.zeros(3))
        w = ag.parameter("w", np.zeros((3, 2)))
        out = ag.tanh(ag.matmul(x, w))
        out.name = "out"
        rng = np.random.default_rng(1)
        bindings = {"x": rng.normal(size=3), "w": rng.normal(size=(3, 2))}
        first = ag.forward_eval(out, bindings)["out"].copy()
        second = ag.forward_eval(out, bindings)["out"]
        np.testing.assert_array_equal(first, second)

    def test_unbound_leaf_rejected(self):
        x = ag.input_node("x", np.zeros(3))
        out = ag.tanh(x)
        with pytest.raises(UsageError, match="x"):
            ag.forward_eval(out, {})

    def test_nonfinite_intermediate_rejected(self):
        x = ag.input_node("x", np.zeros(1))
        out = ag.log(x)
        with pytest.raises(NumericError):
            ag.forward_eval(out, {"x": np.zeros(1)})


class TestBackward:
    def test_identity(self):
        x = ag.parameter("x", 3.0)
        grads = ag.backward(x)
        assert grads["x"] == 1.0

    def test_product_rule(self):
        x = ag.parameter("x", 3.0)
        grads = ag.backward(ag.mul(x, x))
        assert grads["x"] == pytest.approx(6.0)

    def test_stop_gradient_blocks_exactly(self):
        x = ag.parameter("x", np.array([1.0, 2.0]))
        loss = ag.reduce_sum(ag.mul(ag.stop_gradient(x), ag.stop_gradient(x)))
        grads = ag.backward(loss)
        np.testing.assert_array_equal(grads["x"], np.zeros(2))

    def test_stop_gradient_forward_passthrough(self):
        x = ag.constant(np.array([1.0, -2.0]))
        np.testing.assert_array_equal(ag.stop_gradient(x).value, x.value)

    def test_loss_must_be_scalar(self):
        x = ag.parameter("x", np.ones(3))
        with pytest.raises(UsageError):
            ag.backward(x)

    def test_unused_parameter_gets_zero_gradient(self):
        x = ag.parameter("x", 2.0)
        y = ag.parameter("y", np.ones(2))
        loss = ag.mul(x, x)
        # y is not reachable from the loss at all, so it is absent
        grads = ag.backward(loss)
        assert "y" not in grads
        # but a parameter that is reachable only through stop_gradient gets zeros
        loss2 = ag.add(ag.mul(x, x), ag.reduce_sum(ag.stop_gradient(y)))
        grads2 = ag.backward(loss2)
        np.testing.assert_array_equal(grads2["y"], np.zeros(2))

    def test_repeat_backward_is_bit_identical(self):
        rng = np.random.default_rng(7)
        x = ag.parameter("x", rng.normal(size=(4, 3)))
        w = ag.parameter("w", rng.normal(size=(3, 3)))
        loss = ag.reduce_sum(ag.tanh(ag.matmul(x, w)))
        g1 = ag.backward(loss)
        g2 = ag.backward(loss)
        np.testing.assert_array_equal(g1["x"], g2["x"])
        np.testing.assert_array_equal(g1["w"], g2["w"])


def _random_net_loss(params):
    x = ag.constant(np.linspace(-1.0, 1.0, 6))
    h = ag.tanh(ag.add(ag.matmul(x, ag.parameter("w1", params["w1"])),
                       ag.parameter("b1", params["b1"])))
    out = ag.add(ag.matmul(h, ag.parameter("w2", params["w2"])),
                 ag.parameter("b2", params["b2"]))
    return ag.reduce_sum(ag.mul(out, out))


class TestGradientCheck:
    def test_linear_is_exact(self):
        def build(params):
            w = ag.parameter("w", params["w"])
            return ag.reduce_sum(ag.scale(w, 3.0))

        err = ag.gradient_check(build, {"w": np.arange(4.0)})
        assert err < 1e-9

    def test_two_layer_tanh_network(self):
        rng = np.random.default_rng(21)
        params = {
            "w1": rng.normal(size=(6, 5)), "b1": rng.normal(size=5),
            "w2": rng.normal(size=(5, 4)), "b2": rng.normal(size=4),
        }
        assert ag.gradient_check(_random_net_loss, params, eps=1e-5) < 1e-4

    def test_stop_gradient_mismatch_is_reported_not_raised(self):
        def build(params):
            w = ag.parameter("w", params["w"])
            return ag.reduce_sum(ag.mul(ag.stop_gradient(w), w))

        err = ag.gradient_check(build, {"w": np.array([1.0, 2.0])})
        assert err > 1e-2  # analytic sees w, finite differences see 2w

    def test_eps_bounds_validated(self):
        with pytest.raises(UsageError):
            ag.gradient_check(lambda p: ag.constant(0.0), {}, eps=1.0)


class TestOpGradients:
    """Every op's backward agrees with central differences."""

    def check(self, build, params, tol=2e-5):
        assert ag.gradient_check(build, params, eps=1e-5) < tol

    def test_matmul_all_shapes(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        v = rng.normal(size=4)
        self.check(lambda p: ag.reduce_sum(
            ag.matmul(ag.parameter("a", p["a"]), ag.parameter("b", p["b"]))),
            {"a": a, "b": b})
        self.check(lambda p: ag.reduce_sum(
            ag.matmul(ag.parameter("v", p["v"]), ag.parameter("b", p["b"]))),
            {"v": v, "b": b})
        self.check(lambda p: ag.reduce_sum(
            ag.matmul(ag.parameter("a", p["a"]), ag.parameter("v", p["v"]))),
            {"a": a, "v": v})

    def test_bias_add_and_transpose(self):
        rng = np.random.default_rng(4)
        self.check(lambda p: ag.reduce_sum(ag.tanh(ag.add(
            ag.transpose(ag.parameter("a", p["a"])), ag.parameter("b", p["b"])))),
            {"a": rng.normal(size=(3, 5)), "b": rng.normal(size=3)})

    def test_slice_concat_vstack(self):
        rng = np.random.default_rng(5)

        def build(p):
            a = ag.parameter("a", p["a"])
            left = ag.slice_cols(a, 0, 2)
            right = ag.slice_cols(a, 2, 5)
            glued = ag.concat_cols([right, left])
            stacked = ag.vstack([glued, ag.parameter("v", p["v"])])
            return ag.reduce_sum(ag.mul(stacked, stacked))

        self.check(build, {"a": rng.normal(size=(2, 5)), "v": rng.normal(size=5)})

    def test_softmax_log_take_per_row(self):
        rng = np.random.default_rng(6)

        def build(p):
            lp = ag.log(ag.row_softmax(ag.parameter("s", p["s"])))
            return ag.negate(ag.reduce_sum(ag.take_per_row(lp, np.array([0, 2]))))

        self.check(build, {"s": rng.normal(size=(2, 4))})

    def test_dot(self):
        rng = np.random.default_rng(7)
        self.check(lambda p: ag.dot(ag.parameter("a", p["a"]), ag.parameter("b", p["b"])),
                   {"a": rng.normal(size=5), "b": rng.normal(size=5)})

    def test_l2_scores(self):
        rng = np.random.default_rng(8)

        def build(p):
            scores = ag.l2_scores(ag.parameter("z", p["z"]), ag.parameter("c", p["c"]))
            return ag.reduce_sum(ag.mul(scores, scores))

        self.check(build, {"z": rng.normal(size=(3, 4)), "c": rng.normal(size=(5, 4))})

    def test_l2_scores_vector(self):
        rng = np.random.default_rng(9)
        self.check(lambda p: ag.reduce_sum(
            ag.l2_scores(ag.parameter("z", p["z"]), ag.parameter("c", p["c"]))),
            {"z": rng.normal(size=4), "c": rng.normal(size=(5, 4))})

    def test_cosine_scores(self):
        rng = np.random.default_rng(10)
        upstream = rng.normal(size=(3, 5))
        self.check(lambda p: ag.reduce_sum(ag.mul(
            ag.cosine_scores(ag.parameter("z", p["z"]), ag.parameter("c", p["c"])),
            ag.constant(upstream))),
            {"z": rng.normal(size=(3, 4)) + 2.0, "c": rng.normal(size=(5, 4)) + 1.0})

    def test_cosine_scores_vector(self):
        rng = np.random.default_rng(11)
        self.check(lambda p: ag.reduce_sum(
            ag.cosine_scores(ag.parameter("z", p["z"]), ag.parameter("c", p["c"]))),
            {"z": rng.normal(size=4) + 1.5, "c": rng.normal(size=(5, 4)) + 1.0})

    def test_take_rows(self):
        rng = np.random.default_rng(12)
        idx = np.array([2, 0, 2])

        def build(p):
            rows = ag.take_rows(ag.parameter("c", p["c"]), idx)
            return ag.reduce_sum(ag.mul(rows, rows))

        self.check(build, {"c": rng.normal(size=(4, 3))})

    def test_duplicate_parameter_names_rejected(self):
        loss = ag.add(ag.parameter("w", 1.0), ag.parameter("w", 2.0))
        with pytest.raises(UsageError, match="duplicate|reuse"):
            ag.backward(loss)


class TestStraightThroughSelect:
    def test_forward_picks_argmax_row(self):
        scores = ag.constant(np.array([[0.1, 0.9, 0.3], [2.0, -1.0, 2.0]]))
        book = ag.constant(np.arange(6.0).reshape(3, 2))
        out = ag.straight_through_select(scores, book)
        np.testing.assert_array_equal(out.value, [[2.0, 3.0], [0.0, 1.0]])  # ties go low

    def test_single_codeword_gradient_is_upstream(self):
        # With L=1 the soft probability is identically 1 and the softmax
        # Jacobian vanishes, so the codeword receives exactly the upstream.
        book = ag.parameter("c", np.array([[0.5, -0.25]]))
        scores = ag.l2_scores(ag.constant(np.array([0.1, 0.2])), book)
        out = ag.straight_through_select(scores, book)
        loss = ag.reduce_sum(out)
        grads = ag.backward(loss)
        np.testing.assert_allclose(grads["c"], [[1.0, 1.0]], atol=1e-15)

    def test_backward_matches_frozen_surrogate(self):
        # The straight-through gradients must equal finite differences of
        # (one_hot0 - p0 + softmax(s)) @ C with the constants frozen at the
        # base point.
        rng = np.random.default_rng(13)
        base = {"s": rng.normal(size=(3, 4)), "c": rng.normal(size=(4, 2))}
        s0 = base["s"]
        p0 = ag.softmax_rows(s0)
        idx0 = np.argmax(s0, axis=-1)
        onehot0 = np.zeros_like(p0)
        onehot0[np.arange(3), idx0] = 1.0
        u = rng.normal(size=(3, 2))

        s_node = ag.parameter("s", base["s"])
        c_node = ag.parameter("c", base["c"])
        out = ag.straight_through_select(s_node, c_node)
        loss = ag.reduce_sum(ag.mul(out, ag.constant(u)))
        analytic = ag.backward(loss)

        def surrogate(p):
            coeff = ag.add(ag.constant(onehot0 - p0),
                           ag.row_softmax(ag.parameter("s", p["s"])))
            out = ag.matmul(coeff, ag.parameter("c", p["c"]))
            return ag.reduce_sum(ag.mul(out, ag.constant(u)))

        numeric = ag.central_differences(lambda p: float(surrogate(p).value), base, 1e-6)
        assert ag.max_relative_error(analytic, numeric) < 1e-4


class TestSteSelectedProb:
    def test_forward_is_exactly_one(self):
        probs = ag.constant(np.array([[0.2, 0.8], [0.7, 0.3]]))
        out = ag.ste_selected_prob(probs, np.array([1, 0]))
        np.testing.assert_array_equal(out.value, [1.0, 1.0])

    def test_backward_routes_to_selected(self):
        probs = ag.parameter("p", np.array([[0.2, 0.8], [0.7, 0.3]]))
        loss = ag.reduce_sum(ag.ste_selected_prob(probs, np.array([1, 0])))
        grads = ag.backward(loss)
        np.testing.assert_array_equal(grads["p"], [[0.0, 1.0], [1.0, 0.0]])

    def test_logp_mode_scales_by_inverse_probability(self):
        probs = ag.parameter("p", np.array([[0.2, 0.8]]))
        loss = ag.reduce_sum(ag.ste_selected_prob(probs, np.array([1]), mode="logp"))
        grads = ag.backward(loss)
        np.testing.assert_allclose(grads["p"], [[0.0, 1.25]])
