import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scoredm import autodiff as ad
from scoredm.autodiff import GraphConsumedError, Tensor
from scoredm.gradcheck import PRIMITIVES, check_primitive


def grad_of(fn, *values):
    ts = [Tensor(v, requires_grad=True) for v in values]
    fn(*ts).backward()
    return [t.grad for t in ts]


class TestTensor:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            Tensor([np.inf])

    def test_diagnostic_flag_allows_nonfinite(self):
        t = Tensor([np.nan, 1.0], allow_nonfinite=True)
        assert np.isnan(t.data[0])

    def test_float64_storage(self):
        t = Tensor(np.arange(6, dtype=np.int32).reshape(2, 3))
        assert t.data.dtype == np.float64
        assert t.shape == (2, 3)
        assert t.data.size == 6

    def test_backward_replay_is_error(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ad.reduce_sum(ad.square(x))
        y.backward()
        with pytest.raises(GraphConsumedError):
            y.backward()

    def test_fresh_forward_after_backward(self):
        x = Tensor([3.0], requires_grad=True)
        ad.reduce_sum(x * x).backward()
        first = x.grad.copy()
        x.grad = None
        ad.reduce_sum(x * x).backward()
        np.testing.assert_array_equal(x.grad, first)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y.is_leaf


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(np.eye(2), a).data, a)

    def test_hand_product(self):
        assert ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_grad_of_sum_is_ones_bt(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        ga, gb = grad_of(lambda x, y: ad.reduce_sum(x @ y), a, b)
        np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.T, rtol=1e-12)
        fd = ad.finite_difference_gradient(lambda v: np.sum(v @ b), a, 1e-5)
        np.testing.assert_allclose(ga, fd, rtol=1e-6)


class TestElementwise:
    def test_relu(self):
        assert ad.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]

    def test_exp_derivative_at_zero(self):
        (g,) = grad_of(lambda x: ad.reduce_sum(ad.exp(x)), [0.0])
        assert g[0] == 1.0

    def test_softplus_derivative_is_sigmoid(self):
        (g,) = grad_of(lambda x: ad.reduce_sum(ad.softplus(x)), [3.0])
        fd = ad.finite_difference_gradient(lambda v: np.sum(np.logaddexp(0.0, v)), np.array([3.0]))
        assert g[0] == pytest.approx(1.0 / (1.0 + np.exp(-3.0)), rel=1e-12)
        assert g[0] == pytest.approx(fd[0], rel=1e-8)

    def test_log_domain_error(self):
        with pytest.raises(ValueError):
            ad.log([1.0, 0.0])
        with pytest.raises(ValueError):
            ad.log([-1.0])

    def test_division_by_zero(self):
        with pytest.raises(ZeroDivisionError):
            ad.div([1.0], [0.0])

    def test_softplus_large_inputs_stable(self):
        out = ad.softplus([-800.0, 800.0]).data
        np.testing.assert_allclose(out, [0.0, 800.0])

    def test_broadcast_rules(self):
        m = np.ones((3, 2))
        assert ad.add(m, 2.0).shape == (3, 2)
        assert ad.add(m, np.array([1.0, 2.0])).shape == (3, 2)
        with pytest.raises(ValueError):
            ad.add(m, np.ones((3, 1)))  # column broadcast is not allowed
        with pytest.raises(ValueError):
            ad.add(m, np.ones((2, 3)))

    def test_row_broadcast_gradient_sums_rows(self):
        _, gb = grad_of(lambda a, b: ad.reduce_sum(a + b), np.zeros((4, 3)), np.zeros(3))
        np.testing.assert_array_equal(gb, [4.0, 4.0, 4.0])


class TestReduce:
    def test_mean(self):
        assert ad.reduce_mean([2.0, 4.0, 6.0]).item() == 4.0

    def test_sum_over_empty_axis(self):
        out = ad.reduce_sum(np.zeros((0, 3)), axis=0)
        np.testing.assert_array_equal(out.data, np.zeros(3))

    def test_mean_over_empty_axis_is_error(self):
        with pytest.raises(ValueError):
            ad.reduce_mean(np.zeros((0, 3)), axis=0)

    def test_invalid_axis(self):
        with pytest.raises(ValueError):
            ad.reduce_sum(np.ones((2, 2)), axis=2)

    def test_mean_gradient_is_uniform(self):
        x = np.random.default_rng(1).standard_normal(5)
        (g,) = grad_of(ad.reduce_mean, x)
        np.testing.assert_allclose(g, np.full(5, 0.2))
        fd = ad.finite_difference_gradient(np.mean, x)
        np.testing.assert_allclose(g, fd, rtol=1e-8)

    def test_logsumexp_stable(self):
        out = ad.logsumexp(np.array([[1000.0, 1000.0]]), axis=1)
        assert out.item() == pytest.approx(1000.0 + np.log(2.0))

    def test_row_norm_zero_row_has_zero_gradient(self):
        (g,) = grad_of(lambda x: ad.reduce_sum(ad.row_norm(x)), np.array([[0.0, 0.0], [3.0, 4.0]]))
        np.testing.assert_allclose(g, [[0.0, 0.0], [0.6, 0.8]])


class TestDetach:
    def test_frozen_factor(self):
        (g,) = grad_of(lambda x: ad.reduce_sum(ad.detach(x) * x), [3.0])
        assert g[0] == 3.0

    def test_detach_of_square(self):
        x = Tensor([2.0], requires_grad=True)
        y = ad.reduce_sum(ad.detach(ad.square(x)) + 0.0 * x)
        y.backward()
        assert x.grad[0] == 0.0

    def test_detach_removes_only_its_path(self):
        # f = a*b + a*detach(b): df/db = a (first path only), df/da = 2b
        ga, gb = grad_of(lambda a, b: ad.reduce_sum(a * b + a * ad.detach(b)), [2.0], [5.0])
        assert ga[0] == 10.0
        assert gb[0] == 2.0

    def test_gradient_of_a_times_detached_b(self):
        _, gb = grad_of(lambda a, b: ad.reduce_sum(a * ad.detach(b)), [2.0], [5.0])
        assert gb is None or gb[0] == 0.0


class TestReparameterize:
    def test_standard_case(self):
        e = np.array([[0.3, -1.2]])
        np.testing.assert_array_equal(ad.reparameterized_sample(np.zeros((1, 2)), np.zeros((1, 2)), e).data, e)

    def test_zero_noise(self):
        mu = np.array([[1.5, -2.0]])
        np.testing.assert_array_equal(ad.reparameterized_sample(mu, np.ones((1, 2)), np.zeros((1, 2))).data, mu)

    def test_logvar_gradient(self):
        rng = np.random.default_rng(3)
        mu, lv, e = rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        _, g = grad_of(lambda m, l: ad.reduce_sum(ad.reparameterized_sample(m, l, e)), mu, lv)
        np.testing.assert_allclose(g, 0.5 * np.exp(0.5 * lv) * e, rtol=1e-12)
        fd = ad.finite_difference_gradient(lambda v: np.sum(mu + np.exp(0.5 * v) * e), lv)
        np.testing.assert_allclose(g, fd, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.reparameterized_sample(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)))


class TestFiniteDifference:
    def test_square(self):
        g = ad.finite_difference_gradient(lambda v: float(v[0] ** 2), np.array([3.0]), 1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        g = ad.finite_difference_gradient(lambda v: 7.0, np.zeros(4))
        np.testing.assert_array_equal(g, np.zeros(4))

    def test_nonfinite_is_error(self):
        with pytest.raises(FloatingPointError):
            with np.errstate(divide="ignore", invalid="ignore"):
                ad.finite_difference_gradient(lambda v: float(np.log(v[0])), np.array([0.0]))

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            ad.finite_difference_gradient(lambda v: 0.0, np.zeros(1), h=0.0)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    errs = [check_primitive(name, seed) for seed in range(10)]
    assert max(errs) <= 1e-4


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(11)
        a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        out = ad.reduce_mean(ad.tanh(a @ b) * ad.softplus(a @ b))
        out.backward()
        return out.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)),
       arrays(np.float64, (3, 2), elements=st.floats(-3, 3)))
def test_detach_zero_flow_property(a, b):
    ga, gb = grad_of(lambda x, y: ad.reduce_sum(x * ad.detach(y)), a, b)
    np.testing.assert_array_equal(ga, b)
    assert gb is None or not np.any(gb)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
def test_tanh_composite_matches_fd(x):
    (g,) = grad_of(lambda t: ad.reduce_sum(ad.tanh(t) * ad.exp(t)), x)
    fd = ad.finite_difference_gradient(lambda v: float(np.sum(np.tanh(v) * np.exp(v))), x)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)
