"""
Autodiff engine: finite-difference checks for every primitive
"""

import numpy as np
import pytest

from tensor import Tensor, gradcheck, is_grad_enabled, no_grad, take, where

TOL = 1e-6


def test_elementwise_gradients(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4)) + 3.0
    assert gradcheck(lambda x, y: x + y, [a, b], eps=1e-6) < TOL
    assert gradcheck(lambda x, y: x - y, [a, b], eps=1e-6) < TOL
    assert gradcheck(lambda x, y: x * y, [a, b], eps=1e-6) < TOL
    assert gradcheck(lambda x, y: x / y, [a, b], eps=1e-6) < TOL
    assert gradcheck(lambda x: -x.square(), [a], eps=1e-6) < TOL


def test_sqrt_and_relu_gradients(rng):
    positive = rng.uniform(0.5, 2.0, size=(5,))
    assert gradcheck(lambda x: x.sqrt(), [positive], eps=1e-6) < TOL
    away_from_kink = rng.standard_normal(20)
    away_from_kink[np.abs(away_from_kink) < 0.1] = 0.5
    assert gradcheck(lambda x: x.relu(), [away_from_kink], eps=1e-6) < TOL


def test_broadcast_gradients(rng):
    x = rng.standard_normal((2, 3, 4))
    row = rng.standard_normal((1, 3, 1))
    scalar = rng.standard_normal(1)
    assert gradcheck(lambda a, b: a * b + b, [x, row], eps=1e-6) < TOL
    assert gradcheck(lambda a, s: a * s, [x, scalar], eps=1e-6) < TOL

    b = Tensor(row, requires_grad=True)
    (Tensor(x) * b).sum().backward()
    assert b.grad.shape == (1, 3, 1)
    np.testing.assert_allclose(b.grad, x.sum(axis=(0, 2), keepdims=True))


def test_reduction_and_reshape_gradients(rng):
    x = rng.standard_normal((2, 3, 4))
    assert gradcheck(lambda a: a.sum(axis=1), [x], eps=1e-6) < TOL
    assert gradcheck(lambda a: a.mean(axis=(0, 2), keepdims=True), [x], eps=1e-6) < TOL
    assert gradcheck(lambda a: a.mean(), [x], eps=1e-6) < TOL
    assert gradcheck(lambda a: a.reshape(6, 4) * 2.0, [x], eps=1e-6) < TOL


def test_matmul_gradient(rng):
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    assert gradcheck(lambda x, y: x @ y, [a, b], eps=1e-6) < TOL


def test_where_and_take_gradients(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((4, 3))
    mask = np.array([[True], [False], [True], [False]])
    assert gradcheck(lambda x, y: where(mask, x, y), [a, b], eps=1e-6) < TOL
    # repeated indices accumulate
    indices = np.array([2, 0, 2, 1])
    assert gradcheck(lambda x: take(x, indices), [a], eps=1e-6) < TOL
    x = Tensor(a, requires_grad=True)
    take(x, indices).sum().backward()
    np.testing.assert_allclose(x.grad[:, 0], [1.0, 1.0, 2.0, 0.0])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x + x
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_backward_accumulates_across_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * 2.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [5.0, 5.0])
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert not y.requires_grad
    assert y._ctx is None


def test_no_grad_restores_state_after_exception():
    with pytest.raises(RuntimeError):
        with no_grad():
            raise RuntimeError("boom")
    assert is_grad_enabled()


def test_backward_needs_scalar_or_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_dtypes():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64
    assert (Tensor(np.zeros(2, dtype=np.float64)) + 1.0).dtype == np.float64


def test_gradcheck_flags_a_wrong_gradient(rng):
    from tensor import Function

    class BadSquare(Function):
        def forward(self, x):
            self.x = x
            return x * x

        def backward(self, grad):
            return (grad * self.x,)

    assert gradcheck(lambda t: BadSquare.apply(t), [rng.standard_normal(6) + 2.0], eps=1e-6) > 0.1
