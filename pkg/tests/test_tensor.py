import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from flatlora import tensor as T
from flatlora.errors import ContractError, DimensionError, NonFiniteError
from flatlora.validation import numeric_grad, rel_err


def leaf(x):
    return T.Tensor(x, requires_grad=True)


def test_matmul_identity_and_small_product():
    eye = T.Tensor(np.eye(2))
    x = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((eye @ x).data, x.data)
    assert np.array_equal((T.Tensor([[1.0, 2.0]]) @ T.Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_sum_of_matmul_gradients():
    a, b = leaf([[1.0, 2.0]]), leaf([[3.0], [4.0]])
    T.backward(T.sum(a @ b))
    assert np.array_equal(a.grad, [[3.0, 4.0]])
    assert np.array_equal(b.grad, [[1.0], [2.0]])


def test_relu_values_and_grad():
    x = leaf([-1.0, 0.0, 2.0])
    y = T.relu(x)
    assert np.array_equal(y.data, [0.0, 0.0, 2.0])
    T.backward(T.sum(y))
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_scale_by_zero_gives_zero_gradient():
    x = leaf([1.0, -2.0])
    T.backward(T.sum(T.scale(x, 0.0)))
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_layernorm_constant_row_is_zero_and_symmetric_row():
    g, b = T.Tensor(np.ones(3)), T.Tensor(np.zeros(3))
    out = T.layernorm(T.Tensor([[5.0, 5.0, 5.0], [-1.0, 0.0, 1.0]]), g, b).data
    assert np.array_equal(out[0], np.zeros(3))
    expected = np.array([-1.0, 0.0, 1.0]) / math.sqrt(2 / 3 + 1e-5)
    assert np.allclose(out[1], expected, atol=1e-12)


def test_layernorm_two_element_row():
    out = T.layernorm(T.Tensor([[0.0, 2.0]]), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2))).data
    assert np.allclose(out, [[-1.0, 1.0]], atol=1e-5)


def test_linear_and_quadratic_gradients():
    w = leaf([1.0, 2.0, 3.0])
    T.backward(T.sum(w))
    assert np.array_equal(w.grad, [1.0, 1.0, 1.0])
    w = leaf([1.0, 2.0, 3.0])
    T.backward(T.sum(T.mul(w, w)))
    assert np.array_equal(w.grad, [2.0, 4.0, 6.0])


def test_cross_entropy_uniform_logits():
    loss = T.softmax_cross_entropy(T.Tensor(np.zeros((1, 4))), np.array([2]))
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_cross_entropy_large_logits_stay_finite():
    loss = T.softmax_cross_entropy(T.Tensor([[1000.0, -1000.0]]), np.array([1]))
    assert abs(loss.item() - 2000.0) < 1e-9


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ContractError):
        T.softmax_cross_entropy(T.Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_non_scalar_loss_rejected():
    with pytest.raises(ContractError):
        T.backward(leaf(np.ones(3)) * 2.0)


def test_nodes_visited_once_on_diamond_graph():
    x = leaf([1.0, 2.0])
    y = T.relu(x)
    z = T.add(T.mul(y, y), y)
    visited = T.backward(T.sum(z))
    assert visited == 5
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_leaf_gradients_accumulate_and_inputs_untouched():
    a = np.array([[0.5, -1.0], [2.0, 0.25]])
    x = leaf(a)
    before = a.copy()
    for _ in range(2):
        T.backward(T.sum(T.mul(x, x)))
    assert np.array_equal(x.grad, 4 * a)
    assert np.array_equal(x.data, before)


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert y.is_leaf and not y.requires_grad


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.scale(T.Tensor([1e308]), 1e10)


def test_gelu_and_softmax_finite_difference():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    for op in (T.gelu, T.softmax):
        x = leaf(x0)
        T.backward(T.sum(T.mul(op(x), T.Tensor(w))))
        num = numeric_grad(lambda v: float(np.sum(op(T.Tensor(v)).data * w)), x0.copy())
        assert rel_err(x.grad, num) < 1e-4


def test_embedding_scatters_repeated_indices():
    table = leaf(np.arange(6.0).reshape(3, 2))
    out = T.embedding(table, np.array([[0, 2, 0]]))
    T.backward(T.sum(out))
    assert np.array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])


matrices = hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                      elements=st.floats(-3, 3))


@settings(max_examples=40, deadline=None)
@given(matrices)
def test_matmul_gradient_matches_finite_difference(a):
    rng = np.random.default_rng(a.size)
    b0 = rng.normal(size=(a.shape[1], 3))
    x, b = leaf(a), leaf(b0)
    w = rng.normal(size=(a.shape[0], 3))
    T.backward(T.sum(T.mul(x @ b, T.Tensor(w))))
    num = numeric_grad(lambda v: float(np.sum((v @ b0) * w)), a.copy())
    assert np.allclose(x.grad, num, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 6)),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(T.Tensor(x)).data
    assert np.allclose(s.sum(axis=-1), 1.0)
    assert np.all(s >= 0)
