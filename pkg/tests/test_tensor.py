from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kdprune import ops
from kdprune.errors import ContractError, DimensionError
from kdprune.tensor import Tensor, default_dtype, float64_mode, is_grad_enabled, no_grad

finite = st.floats(-10, 10, allow_nan=False, width=64)


def test_default_dtype_is_float32_and_float64_mode_restores():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with float64_mode():
        assert default_dtype() == np.float64
        assert Tensor([1.0]).dtype == np.float64
    assert default_dtype() == np.float32


def test_backward_accumulates_on_reused_leaf():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    y = (x * x + x * 3.0).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)


def test_grads_accumulate_across_backward_calls():
    x = Tensor([2.0], requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_non_scalar_backward_requires_explicit_grad():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()
    (x * 2.0).backward(np.ones((2, 2)))
    np.testing.assert_allclose(x.grad, 2.0)


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        assert not is_grad_enabled()
        y = x * 2.0
    assert is_grad_enabled()
    assert not y.requires_grad


def test_intermediate_nodes_do_not_keep_grad():
    x = Tensor([1.0, -1.0], requires_grad=True)
    h = x * 2.0
    h.relu().sum().backward()
    assert h.grad is None
    np.testing.assert_allclose(x.grad, [2.0, 0.0])


def test_deep_chain_does_not_hit_recursion_limit():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [1.0])


def test_mul_rejects_broadcast_shapes():
    with pytest.raises(DimensionError):
        ops.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_gradients_match_closed_form(a, b):
    with float64_mode():
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        (ta @ tb).sum().backward()
    np.testing.assert_allclose(ta.grad, np.ones((3, 2)) @ b.T, atol=1e-12)
    np.testing.assert_allclose(tb.grad, a.T @ np.ones((3, 2)), atol=1e-12)


@given(arrays(np.float64, (2, 5), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = ops.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (p >= 0).all()


def test_softmax_oracle_and_stability():
    np.testing.assert_allclose(ops.softmax(Tensor(np.array([2.0, 0.0]))).data,
                               [0.880797077977882, 0.119202922022118], atol=1e-12)
    p = ops.softmax(Tensor(np.array([1000.0, 1000.5]))).data
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p, [0.3775406687981454, 0.6224593312018546], atol=1e-7)


def test_softmax_rejects_nonfinite():
    with pytest.raises(DimensionError):
        ops.softmax(Tensor(np.array([np.inf, 0.0])))


def test_cross_entropy_matches_manual():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 3.0]])
    labels = np.array([1, 2])
    lse = np.log(np.exp(logits).sum(axis=1))
    expected = np.mean(lse - logits[[0, 1], labels])
    assert float(ops.cross_entropy(Tensor(logits), labels).data) == pytest.approx(expected, rel=1e-12)


@given(arrays(np.float64, (4,), elements=st.floats(-50, 50, width=64)))
def test_sigmoid_stable_and_bounded(x):
    s = ops.sigmoid(Tensor(x)).data
    assert np.isfinite(s).all() and (s >= 0).all() and (s <= 1).all()
    np.testing.assert_allclose(s + ops.sigmoid(Tensor(-x)).data, 1.0, atol=1e-12)
