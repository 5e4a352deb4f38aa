import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptor import tensor as T
from adaptor.errors import DimensionError, GraphStateError, NumericError
from adaptor.tensor import Tensor

from gradsuite import OPS, gradcheck
from oracles import REL_TOL


@pytest.mark.parametrize("name,build,make", OPS, ids=[o[0] for o in OPS])
def test_primitive_matches_finite_differences(name, build, make):
    for seed in range(3):
        rng = np.random.default_rng(seed)
        assert gradcheck(build, make(rng), seed) <= REL_TOL


# -- forward examples ------------------------------------------------------------
def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(np.eye(2), a).data, a)
    assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]
    assert not T.matmul(np.zeros((2, 2)), a).data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    assert np.allclose(T.softmax(np.zeros(2)).data, [0.5, 0.5])
    assert np.allclose(T.softmax(np.log([1.0, 3.0])).data, [0.25, 0.75], atol=1e-15)
    assert T.softmax(np.array([7.0])).data.tolist() == [1.0]


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        T.softmax(np.array([1.0, np.nan]))


def test_softmax_survives_huge_logits():
    out = T.softmax(np.array([[1000.0, 0.0], [-1000.0, -999.0]]), axis=1).data
    assert np.isfinite(out).all()
    assert np.allclose(out.sum(axis=1), 1.0)


def test_layer_norm_examples():
    one, zero = np.ones(3), np.zeros(3)
    assert np.allclose(T.layer_norm(np.full((1, 3), 5.0), one, zero).data, 0.0)
    out = T.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=1e-12).data
    assert np.allclose(out, [[1.0, -1.0]])
    bias = np.array([0.1, 0.2, 0.3])
    out = T.layer_norm(np.random.default_rng(0).normal(size=(4, 3)), zero, bias).data
    assert np.array_equal(out, np.tile(bias, (4, 1)))


def test_layer_norm_rejects_empty_tokens():
    with pytest.raises(DimensionError):
        T.layer_norm(np.zeros((2, 0)), np.zeros(0), np.zeros(0))


def test_elementwise_examples():
    assert T.relu(np.array([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert np.allclose(T.l2_normalize_rows(np.array([[3.0, 4.0]])).data, [[0.6, 0.8]])
    x = np.random.default_rng(1).normal(size=(2, 3))
    assert np.array_equal(T.scale(x, 1.0).data, x)


def test_gelu_tanh_form():
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    assert np.allclose(T.gelu(x).data, ref, atol=1e-15)


def test_log_of_nonpositive_is_numeric_error():
    with pytest.raises(NumericError):
        T.log(np.array([1.0, 0.0]))
    with pytest.raises(NumericError):
        T.log(np.array([-2.0]))


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    T.tsum(T.relu(x)).backward()
    assert np.array_equal(x.grad, np.zeros(3))


# -- backward contract -------------------------------------------------------------
def test_power_rule_example():
    x = Tensor([3.0], requires_grad=True)
    T.tsum(x * x).backward()
    assert x.grad.tolist() == [6.0]


def test_non_scalar_loss_is_rejected():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphStateError):
        (x * 2.0).backward()


def test_double_backward_is_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(x * x)
    loss.backward()
    with pytest.raises(GraphStateError):
        loss.backward()


def test_disconnected_tensor_gets_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0], requires_grad=True)
    T.tsum(x * x).backward()
    assert y.grad is None or not y.grad.any()


def test_fan_out_accumulates():
    x = Tensor([2.0], requires_grad=True)
    # x used three times: d/dx (x*x + x) = 2x + 1
    T.tsum(x * x + x).backward()
    assert x.grad.tolist() == [5.0]


def test_gradients_accumulate_across_passes_until_zeroed():
    x = Tensor([1.5, -0.5], requires_grad=True)
    T.tsum(x * x).backward()
    T.tsum(x * x).backward()
    assert np.allclose(x.grad, 4 * x.data)
    T.zero_grads([x])
    assert x.grad is None


def test_division_by_zero_is_numeric_error():
    with pytest.raises(NumericError):
        T.div(np.ones(2), np.array([1.0, 0.0]))


def test_broadcast_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        T.add(np.ones((2, 3)), np.ones((3, 2)))


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        loss = T.tsum(T.log_softmax(T.matmul(T.layer_norm(a, np.ones(4), np.zeros(4)), w), axis=1))
        loss.backward()
        return loss.data.tobytes(), a.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


# -- properties ----------------------------------------------------------------------
finite = st.floats(-50, 50, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = T.softmax(x, axis=1).data
    assert np.all(p > 0) or np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    shifted = T.softmax(x + c, axis=1).data
    assert np.max(np.abs(shifted - p)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 4))

    def grad_of(fn):
        x = Tensor(x0, requires_grad=True)
        fn(x).backward()
        return x.grad

    f = lambda x: T.tsum(T.gelu(x))
    g = lambda x: T.tsum(T.mul(T.softmax(x, axis=1), x0))
    combo = grad_of(lambda x: T.scale(f(x), a) + T.scale(g(x), b))
    assert np.allclose(combo, a * grad_of(f) + b * grad_of(g), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-10, 10, width=64)))
def test_l2_normalize_rows_gives_unit_rows(x):
    x = x + np.array([1.0, 0.0, 0.0])  # keep rows away from zero
    if np.any(np.linalg.norm(x, axis=1) < 1e-3):
        return
    out = T.l2_normalize_rows(x).data
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_grad_shape_matches_data():
    rng = np.random.default_rng(0)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    T.tsum(T.linear(rng.normal(size=(3, 4)), w, b)).backward()
    assert w.grad.shape == w.shape and b.grad.shape == b.shape
