"""Autodiff engine: every primitive's backward against central differences."""

import numpy as np
import pytest

from noiseprompt import tensor as T
from noiseprompt.errors import NumericError
from noiseprompt.tensor import Tensor, grad_check


def numeric_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_unary(op, x, tol=1e-6, **kwargs):
    t = Tensor(x.copy())
    out = T.mean(op(t, **kwargs) if kwargs else op(t))
    out.backward()
    ref = numeric_grad(lambda a: float(np.mean((op(Tensor(a), **kwargs) if kwargs else op(Tensor(a))).data)), x.copy())
    np.testing.assert_allclose(t.grad, ref, rtol=tol, atol=tol)


class TestPrimitiveGradients:
    """Backward pass of each primitive matches finite differences <= 1e-6."""

    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def test_add(self):
        a = self.rng.standard_normal((3, 4))
        b = self.rng.standard_normal((3, 4))
        ta, tb = Tensor(a), Tensor(b)
        T.mean(T.add(ta, tb)).backward()
        np.testing.assert_allclose(ta.grad, np.full((3, 4), 1 / 12))
        np.testing.assert_allclose(tb.grad, np.full((3, 4), 1 / 12))

    def test_mul(self):
        a = self.rng.standard_normal((3, 4))
        b = self.rng.standard_normal((3, 4))
        ta, tb = Tensor(a), Tensor(b)
        T.mean(T.mul(ta, tb)).backward()
        np.testing.assert_allclose(ta.grad, b / 12, rtol=1e-12)
        np.testing.assert_allclose(tb.grad, a / 12, rtol=1e-12)

    def test_mul_broadcast(self):
        a = self.rng.standard_normal((2, 3, 4))
        b = self.rng.standard_normal((3, 1))
        ta, tb = Tensor(a), Tensor(b)
        T.mean(T.mul(ta, tb)).backward()
        ref = numeric_grad(
            lambda v: float(np.mean(a * v)), b.copy()
        )
        np.testing.assert_allclose(tb.grad, ref, atol=1e-8)

    def test_matmul(self):
        a = self.rng.standard_normal((4, 3))
        b = self.rng.standard_normal((3, 5))
        ta, tb = Tensor(a), Tensor(b)
        T.mean(T.matmul(ta, tb)).backward()
        ga = numeric_grad(lambda v: float(np.mean(v @ b)), a.copy())
        gb = numeric_grad(lambda v: float(np.mean(a @ v)), b.copy())
        np.testing.assert_allclose(ta.grad, ga, atol=1e-8)
        np.testing.assert_allclose(tb.grad, gb, atol=1e-8)

    def test_matmul_batched(self):
        a = self.rng.standard_normal((2, 3, 4))
        w = self.rng.standard_normal((4, 4))
        ta, tw = Tensor(a), Tensor(w)
        T.mean(T.matmul(ta, tw)).backward()
        gw = numeric_grad(lambda v: float(np.mean(a @ v)), w.copy())
        np.testing.assert_allclose(tw.grad, gw, atol=1e-8)

    def test_softmax(self):
        x = self.rng.standard_normal((2, 5))
        weight = self.rng.standard_normal((2, 5))

        def f(t):
            return T.mul(T.softmax(t), Tensor(weight))

        check_unary(f, x)

    def test_normalize_last(self):
        x = self.rng.standard_normal((3, 8))
        weight = self.rng.standard_normal((3, 8))

        def f(t):
            return T.mul(T.normalize_last(t), Tensor(weight))

        check_unary(f, x)

    def test_relu_away_from_kink(self):
        x = self.rng.standard_normal((4, 4))
        x[np.abs(x) < 0.05] = 0.1
        check_unary(T.relu, x)

    def test_gelu(self):
        check_unary(T.gelu, self.rng.standard_normal((4, 4)))

    def test_softplus(self):
        check_unary(T.softplus, self.rng.standard_normal((4, 4)))

    def test_transpose_reshape(self):
        x = self.rng.standard_normal((2, 3, 4))
        weight = self.rng.standard_normal((4, 6))

        def f(t):
            return T.mul(T.reshape(T.transpose(t, (2, 0, 1)), (4, 6)), Tensor(weight))

        check_unary(f, x)

    def test_sub_neg_sum(self):
        a = self.rng.standard_normal(6)
        ta = Tensor(a)
        T.tsum(T.neg(T.sub(ta, Tensor(np.ones(6))))).backward()
        np.testing.assert_allclose(ta.grad, -np.ones(6))


class TestTensorBasics:
    def test_shape_data_consistency(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        assert t.shape == (2, 3)
        assert t.data.size == 6
        assert t.data.flags["C_CONTIGUOUS"]
        assert t.data.dtype == np.float64

    def test_grad_shape_matches(self):
        t = Tensor(np.ones((3, 2)))
        T.mean(T.mul(t, t)).backward()
        assert t.grad.shape == t.data.shape

    def test_backward_needs_scalar(self):
        t = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            T.add(t, t).backward()

    def test_operator_sugar(self):
        a = Tensor(np.full((2, 2), 3.0))
        b = Tensor(np.full((2, 2), 2.0))
        np.testing.assert_allclose((a + b).data, 5.0)
        np.testing.assert_allclose((a - b).data, 1.0)
        np.testing.assert_allclose((a * b).data, 6.0)
        np.testing.assert_allclose((-a).data, -3.0)
        np.testing.assert_allclose((a @ b).data, 12.0)

    def test_reused_node_accumulates(self):
        t = Tensor(np.array([2.0]))
        out = T.tsum(T.mul(t, t))  # d/dt t^2 = 2t
        out.backward()
        np.testing.assert_allclose(t.grad, [4.0])


class TestGradCheck:
    def test_quadratic(self):
        p = Tensor(np.random.default_rng(0).standard_normal(5))

        def loss(params):
            (q,) = params
            return T.mul(T.tsum(T.mul(q, q)), T.constant(0.5))

        assert grad_check(loss, [p], eps=1e-5) <= 1e-10

    def test_linear_relu_layer(self):
        rng = np.random.default_rng(1)
        w = Tensor(rng.standard_normal((4, 3)))
        b = Tensor(rng.standard_normal(3) + 0.5)  # keep activations off the kink
        x = rng.standard_normal((2, 4))

        def loss(params):
            wt, bt = params
            return T.mean(T.relu(T.add(T.matmul(T.constant(x), wt), bt)))

        assert grad_check(loss, [w, b], eps=1e-5) <= 1e-6

    def test_eps_validation(self):
        p = Tensor(np.ones(2))
        with pytest.raises(ValueError):
            grad_check(lambda params: T.tsum(params[0]), [p], eps=0.5)

    def test_non_finite_loss(self):
        p = Tensor(np.ones(2))

        def loss(params):
            return T.constant(np.nan)

        with pytest.raises(NumericError):
            grad_check(loss, [p])


def test_softplus_inverse_roundtrip():
    y = np.geomspace(1e-8, 50.0, 40)
    np.testing.assert_allclose(np.logaddexp(0, T.softplus_inverse(y)), y, rtol=1e-12)


def test_mse_value():
    a = Tensor(np.array([1.0, 2.0]))
    b = Tensor(np.array([0.0, 0.0]))
    assert T.mse(a, b).item() == pytest.approx(2.5)
