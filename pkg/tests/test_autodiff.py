import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from timerag import autodiff as ad

ATOL = 1e-7


def numeric_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn(x)
        flat[i] = orig - eps
        down = fn(x)
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return grad


def check_grad(build, x0):
    """Compare backward() against finite differences for loss = sum(build(x))."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = ad.parameter(x0.copy())
    loss = ad.tsum(build(t))
    ad.backward(loss)
    fd = numeric_grad(lambda x: float(build(ad.Tensor(x)).value.sum()), x0)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(t.grad)), 1e-6)
    np.testing.assert_array_less(np.abs(fd - t.grad) / denom, 1e-4)


class TestElementwiseOps:
    def test_add_grad(self):
        check_grad(lambda t: t + np.ones((3, 4)), np.random.default_rng(0).normal(size=(3, 4)))

    def test_add_broadcast_row(self):
        row = np.random.default_rng(1).normal(size=(1, 4))
        check_grad(lambda t: t + np.ones((3, 4)), row)

    def test_mul_grad(self):
        other = np.random.default_rng(2).normal(size=(3, 4))
        check_grad(lambda t: ad.mul(t, other), np.random.default_rng(3).normal(size=(3, 4)))

    def test_mul_broadcast_scalar(self):
        check_grad(lambda t: ad.mul(t, 2.5), np.random.default_rng(4).normal(size=(5,)))

    def test_exp_grad(self):
        check_grad(ad.exp, np.random.default_rng(5).normal(size=(4,)))

    def test_log_grad(self):
        check_grad(ad.log, np.random.default_rng(6).uniform(0.5, 2.0, size=(4,)))

    def test_power_grad(self):
        check_grad(lambda t: ad.power(t, 3.0), np.random.default_rng(7).uniform(0.5, 2.0, (3,)))

    def test_sigmoid_grad(self):
        check_grad(ad.sigmoid, np.random.default_rng(8).normal(size=(6,)))

    def test_sigmoid_value(self):
        np.testing.assert_allclose(ad.sigmoid(ad.as_tensor(0.0)).value, 0.5)


class TestContractionOps:
    def test_matmul_grad_left(self):
        b = np.random.default_rng(9).normal(size=(4, 2))
        check_grad(lambda t: ad.matmul(t, b), np.random.default_rng(10).normal(size=(3, 4)))

    def test_matmul_grad_right(self):
        a = np.random.default_rng(11).normal(size=(3, 4))
        check_grad(lambda t: ad.matmul(ad.as_tensor(a), t), np.random.default_rng(12).normal(size=(4, 2)))

    @pytest.mark.parametrize(
        "subscripts,shape_a,shape_b",
        [
            ("ij,jk->ik", (3, 4), (4, 2)),
            ("bld,sd->bls", (2, 3, 4), (5, 4)),
            ("bhls,bhsd->bhld", (2, 2, 3, 4), (2, 2, 4, 5)),
            ("bls,sv->blv", (2, 3, 4), (4, 6)),
        ],
    )
    def test_einsum_grads_both_sides(self, subscripts, shape_a, shape_b):
        rng = np.random.default_rng(13)
        a = rng.normal(size=shape_a)
        b = rng.normal(size=shape_b)
        check_grad(lambda t: ad.einsum(subscripts, t, b), a)
        check_grad(lambda t: ad.einsum(subscripts, ad.as_tensor(a), t), b)

    def test_einsum_matches_matmul(self):
        rng = np.random.default_rng(14)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(
            ad.einsum("ij,jk->ik", a, b).value, ad.matmul(ad.as_tensor(a), ad.as_tensor(b)).value
        )


class TestShapeAndReduceOps:
    def test_reshape_grad(self):
        check_grad(lambda t: ad.reshape(t, (6,)), np.random.default_rng(15).normal(size=(2, 3)))

    def test_tsum_axis_grad(self):
        check_grad(lambda t: ad.tsum(t, axis=0), np.random.default_rng(16).normal(size=(3, 4)))

    def test_tsum_keepdims_grad(self):
        check_grad(
            lambda t: ad.tsum(t, axis=1, keepdims=True),
            np.random.default_rng(17).normal(size=(3, 4)),
        )

    def test_tmean_value_and_grad(self):
        x = np.random.default_rng(18).normal(size=(4, 5))
        np.testing.assert_allclose(ad.tmean(ad.as_tensor(x), axis=1).value, x.mean(axis=1))
        check_grad(lambda t: ad.tmean(t, axis=1), x)

    def test_take_along_last_value(self):
        x = np.arange(12, dtype=np.float64).reshape(3, 4)
        idx = np.array([1, 0, 3])
        picked = ad.take_along_last(ad.as_tensor(x), idx)
        np.testing.assert_array_equal(picked.value, [1.0, 4.0, 11.0])

    def test_take_along_last_grad_is_scatter(self):
        x = np.random.default_rng(19).normal(size=(3, 4))
        idx = np.array([2, 2, 0])
        t = ad.parameter(x)
        ad.backward(ad.tsum(ad.take_along_last(t, idx)))
        expected = np.zeros_like(x)
        expected[[0, 1, 2], idx] = 1.0
        np.testing.assert_array_equal(t.grad, expected)


class TestNormalizers:
    def test_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(20).normal(size=(5, 7)) * 10
        s = ad.softmax(ad.as_tensor(x)).value
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), atol=1e-12)

    def test_softmax_grad(self):
        w = np.random.default_rng(21).normal(size=(3, 4))
        check_grad(lambda t: ad.mul(ad.softmax(t), w), np.random.default_rng(22).normal(size=(3, 4)))

    def test_softmax_shift_invariant(self):
        x = np.random.default_rng(23).normal(size=(2, 5))
        np.testing.assert_allclose(
            ad.softmax(ad.as_tensor(x)).value, ad.softmax(ad.as_tensor(x + 100.0)).value, atol=1e-12
        )

    def test_logsumexp_value(self):
        x = np.random.default_rng(24).normal(size=(4, 6))
        expected = np.log(np.exp(x).sum(axis=-1))
        np.testing.assert_allclose(ad.logsumexp(ad.as_tensor(x)).value, expected, atol=1e-12)

    def test_logsumexp_grad_is_softmax(self):
        x = np.random.default_rng(25).normal(size=(3, 5))
        t = ad.parameter(x)
        ad.backward(ad.tsum(ad.logsumexp(t)))
        np.testing.assert_allclose(t.grad, ad.softmax(ad.as_tensor(x)).value, atol=1e-12)

    def test_logsumexp_stable_at_large_inputs(self):
        x = np.array([[1000.0, 1000.0]])
        out = ad.logsumexp(ad.as_tensor(x)).value
        np.testing.assert_allclose(out, 1000.0 + np.log(2.0))


class TestGraphMechanics:
    def test_diamond_accumulation(self):
        # y = x*x + x: reuse of x must accumulate both contributions
        x = ad.parameter(np.array([3.0]))
        ad.backward(ad.tsum(ad.mul(x, x) + x))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_chain_rule_scalar(self):
        x = ad.parameter(np.array([0.5]))
        ad.backward(ad.tsum(ad.exp(ad.mul(x, x))))
        np.testing.assert_allclose(x.grad, [2 * 0.5 * np.exp(0.25)], atol=1e-12)

    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError):
            ad.backward(ad.parameter(np.zeros(3)))

    def test_constants_get_no_grad(self):
        x = ad.parameter(np.ones(2))
        c = ad.as_tensor(np.ones(2))
        ad.backward(ad.tsum(ad.mul(x, c)))
        assert c.grad is None and x.grad is not None

    def test_zero_grads(self):
        x = ad.parameter(np.ones(2))
        ad.backward(ad.tsum(x))
        ad.zero_grads([x])
        assert x.grad is None

    def test_grad_not_aliased_to_upstream(self):
        x = ad.parameter(np.ones(3))
        y = ad.reshape(x, (3, 1))
        ad.backward(ad.tsum(y))
        x.grad[0] = 99.0
        assert y.grad[0, 0] == 1.0

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float64, (3, 4), elements=st.floats(-3, 3, allow_nan=False)),
    )
    def test_composite_expression_gradcheck(self, x):
        check_grad(lambda t: ad.sigmoid(ad.matmul(t, np.ones((4, 2)))), x)
