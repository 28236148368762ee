"""Autodiff engine: op gradients against finite differences, contracts."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from faukd import tensor as T
from faukd.tensor import BatchNormState, Tensor, finite_diff_grad, grad, relative_error

from oracles import softmax_np


def fd_check(f, p, tol=1e-6, eps=1e-5):
    loss = f(p)
    (g,) = grad(loss, [p])
    fd = finite_diff_grad(f, p, eps)
    assert relative_error(g.data, fd.data) < tol


class TestTensorBasics:
    def test_nonfinite_rejected(self):
        with pytest.raises(FloatingPointError):
            Tensor([1.0, np.nan])
        with pytest.raises(FloatingPointError):
            Tensor([np.inf])

    def test_shape_data_consistency(self, rng):
        t = Tensor(rng.normal(size=(3, 4, 5)))
        assert t.size == int(np.prod(t.shape))

    def test_int_input_promoted(self):
        assert Tensor([1, 2, 3]).dtype == np.float64

    def test_grad_linear(self):
        p = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (g,) = grad(p.sum(), [p])
        np.testing.assert_array_equal(g.data, [1.0, 1.0, 1.0])

    def test_grad_quadratic(self):
        p = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (g,) = grad((p * p).sum(), [p])
        np.testing.assert_array_equal(g.data, [2.0, 4.0, 6.0])

    def test_grad_requires_scalar(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            grad(p * p, [p])

    def test_unreachable_param_gets_zero(self):
        p = Tensor([1.0], requires_grad=True)
        q = Tensor([2.0, 3.0], requires_grad=True)
        (gq,) = grad(p.sum(), [q])
        np.testing.assert_array_equal(gq.data, np.zeros(2))

    def test_repeated_grad_identical(self, rng):
        p = Tensor(rng.normal(size=4), requires_grad=True)
        loss = (T.relu(p) * p).sum()
        g1 = grad(loss, [p])[0].data
        g2 = grad(loss, [p])[0].data
        np.testing.assert_array_equal(g1, g2)

    def test_grad_populates_field(self):
        p = Tensor([2.0], requires_grad=True)
        grad((p * p).sum(), [p])
        np.testing.assert_array_equal(p.grad, [4.0])

    def test_detach_cuts_graph(self):
        p = Tensor([3.0], requires_grad=True)
        (g,) = grad(((p * p).detach() * p).sum(), [p])
        np.testing.assert_array_equal(g.data, [9.0])


class TestFiniteDiff:
    def test_sum_of_squares(self):
        fd = finite_diff_grad(lambda t: (t * t).sum(), Tensor([3.0]), 1e-5)
        assert abs(fd.item() - 6.0) < 1e-8

    def test_constant_function(self):
        fd = finite_diff_grad(lambda t: Tensor(1.5), Tensor([1.0, 2.0]), 1e-5)
        np.testing.assert_array_equal(fd.data, np.zeros(2))

    def test_softmax_cross_entropy_matches_analytic(self):
        logits = Tensor([1.0, 0.0])
        onehot = Tensor([1.0, 0.0])  # target class 0

        def f(z):
            return -(T.log(T.softmax(z, axis=-1)) * onehot).sum()

        fd = finite_diff_grad(f, logits, 1e-6)
        analytic = softmax_np(np.array([1.0, 0.0])) - np.array([1.0, 0.0])
        assert relative_error(fd.data, analytic) < 1e-8

    def test_nonfinite_value_raises(self):
        with pytest.raises(FloatingPointError):
            finite_diff_grad(lambda t: float("nan"), Tensor([1.0]), 1e-5)


class TestOpGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_arith_chain(self, seed):
        rs = np.random.default_rng(seed)
        x = Tensor(rs.normal(size=(3, 4)) + 3.0)
        p = Tensor(rs.normal(size=(3, 4)) + 3.0, requires_grad=True)
        fd_check(lambda t: ((x * t - x / t + t**1.5).sum()), p)

    @pytest.mark.parametrize("seed", range(3))
    def test_matmul_broadcast(self, seed):
        rs = np.random.default_rng(seed)
        a = Tensor(rs.normal(size=(2, 3, 4, 5)))
        p = Tensor(rs.normal(size=(3, 5, 2)), requires_grad=True)
        fd_check(lambda t: ((a @ t) * (a @ t)).sum(), p)

    def test_reductions_and_shapes(self, rng):
        p = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        fd_check(lambda t: (t.mean(axis=(0, 2)) * t.sum(axis=(0, 2))).sum(), p)
        fd_check(lambda t: (t.reshape(6, 4).transpose((1, 0)) ** 2.0).sum(), p)
        fd_check(lambda t: (T.broadcast_to(t.mean(axis=0, keepdims=True), (2, 3, 4)) * t).sum(), p)

    def test_nonlinearities(self, rng):
        p = Tensor(rng.normal(size=(4, 4)) + 0.3, requires_grad=True)
        fd_check(lambda t: T.relu(t).sum(), p)
        fd_check(lambda t: T.sigmoid(t).sum(), p)
        fd_check(lambda t: T.exp(t * 0.1).sum(), p)
        q = Tensor(np.abs(rng.normal(size=(4,))) + 0.5, requires_grad=True)
        fd_check(lambda t: T.log(t).sum(), q)
        fd_check(lambda t: T.sqrt(t).sum(), q)

    def test_clip_gradient_mask(self):
        p = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
        (g,) = grad(T.clip(p, 0.0, 1.0).sum(), [p])
        np.testing.assert_array_equal(g.data, [0.0, 1.0, 0.0])

    def test_gather_scatter(self, rng):
        p = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
        idx = np.array([[0, 2, 4], [1, 2, 3]])
        fd_check(lambda t: (T.gather_rows(t, idx) ** 2.0).sum(), p)
        rows = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        base = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
        fd_check(lambda t: (T.scatter_rows(t, idx, rows) ** 2.0).sum(), base)
        fd_check(lambda t: (T.scatter_rows(base, idx, t) ** 2.0).sum(), rows)

    def test_scatter_overwrites_and_gathers(self, rng):
        base = Tensor(np.zeros((4, 2)))
        rows = Tensor(np.ones((2, 2)))
        out = T.scatter_rows(base, np.array([1, 3]), rows)
        np.testing.assert_array_equal(out.data[[1, 3]], np.ones((2, 2)))
        np.testing.assert_array_equal(out.data[[0, 2]], np.zeros((2, 2)))
        got = T.gather_rows(out, np.array([1, 3]))
        np.testing.assert_array_equal(got.data, np.ones((2, 2)))

    def test_conv2d_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 6, 6, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3, 3, 4)) * 0.5, requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        for p_, t in ((x, "x"), (w, "w"), (b, "b")):
            def f(v, which=t):
                args = {"x": x, "w": w, "b": b}
                args[which] = v
                return (T.conv2d(args["x"], args["w"], args["b"], stride=2, padding=1) ** 2.0).sum()
            fd_check(f, p_)

    def test_conv2d_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 8, 8, 3)))
        w = Tensor(rng.normal(size=(3, 3, 3, 5)))
        b = Tensor(np.zeros(5))
        assert T.conv2d(x, w, b, stride=2, padding=1).shape == (1, 4, 4, 5)


class TestSoftmax:
    def test_uniform_on_constant(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0, 0.0]), axis=-1)
        np.testing.assert_allclose(out.data, 0.25)

    def test_ln2_example(self):
        out = T.softmax(Tensor([np.log(2.0), 0.0]), axis=-1)
        np.testing.assert_allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)

    def test_high_temperature_near_uniform(self):
        out = T.softmax(Tensor([4.0, 0.0]), axis=-1, temperature=1000.0)
        assert np.max(np.abs(out.data - 0.5)) < 1e-3

    def test_invalid_temperature(self):
        with pytest.raises(ValueError):
            T.softmax(Tensor([1.0]), temperature=0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(0.1, 10.0))
    def test_sums_to_one(self, vals, temp):
        out = T.softmax(Tensor(np.array(vals)), axis=-1, temperature=temp)
        assert abs(out.data.sum() - 1.0) <= 1e-12
        assert np.all(out.data >= 0.0)

    def test_gradient(self, rng):
        p = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        fd_check(lambda t: (T.softmax(t, axis=-1, temperature=2.0) ** 2.0).sum(), p)


class TestCosineSimilarity:
    def test_identical(self):
        assert T.cosine_similarity(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 2.0, 3.0])).item() == pytest.approx(1.0)

    def test_orthogonal(self):
        assert T.cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0

    def test_zero_vector_rule(self):
        assert T.cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            T.cosine_similarity(Tensor([1.0]), Tensor([1.0, 2.0]))


class TestBatchNorm:
    def test_zero_input_fresh_state(self):
        st_ = BatchNormState.create(3)
        out = T.batch_norm(Tensor(np.zeros((4, 3))), st_, "train")
        np.testing.assert_array_equal(out.data, np.zeros((4, 3)))

    def test_normalizes_batch(self, rng):
        st_ = BatchNormState.create(2)
        x = Tensor(rng.normal(5.0, 2.0, size=(64, 2)))
        out = T.batch_norm(x, st_, "train")
        np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-12)
        # variance deflated by eps / (var + eps)
        np.testing.assert_allclose(out.data.var(axis=0), 1.0, rtol=1e-4)

    def test_eval_identity_with_unit_stats(self, rng):
        st_ = BatchNormState.create(3)
        x = Tensor(rng.normal(size=(5, 3)))
        out = T.batch_norm(x, st_, "eval")
        np.testing.assert_allclose(out.data, x.data, atol=1e-4)

    def test_running_stats_update(self, rng):
        st_ = BatchNormState.create(1)
        x = rng.normal(3.0, 1.0, size=(32, 1))
        T.batch_norm(Tensor(x), st_, "train")
        np.testing.assert_allclose(st_.running_mean, 0.9 * 0.0 + 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(st_.running_var, 0.9 * 1.0 + 0.1 * x.var(axis=0))

    def test_train_needs_two_samples(self):
        st_ = BatchNormState.create(2)
        with pytest.raises(ValueError):
            T.batch_norm(Tensor(np.ones((1, 2))), st_, "train")

    def test_gradients_train_and_eval(self, rng):
        for mode in ("train", "eval"):
            st_ = BatchNormState.create(3)
            p = Tensor(rng.normal(size=(6, 3)), requires_grad=True)

            def f(t):
                fresh = st_.copy()
                return (T.batch_norm(t, fresh, mode) ** 2.0).sum()

            fd_check(f, p)
