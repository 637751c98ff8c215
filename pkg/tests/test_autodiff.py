from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lightdot import autodiff as ad

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def check_op(fn, *inputs, rel=1e-4, floor=1e-6):
    params = {f"x{i}": np.asarray(x, dtype=np.float64) for i, x in enumerate(inputs)}

    def build(P):
        return ad.tsum(fn(*[P[f"x{i}"] for i in range(len(inputs))]) * weights)

    weights = None
    g0 = ad.Graph(record=False)
    out = fn(*g0.bind(params).values())
    weights = np.random.default_rng(0).normal(size=out.shape)
    g = ad.Graph()
    _, grads = ad.value_and_grad(g, build(g.bind(params)))
    fd = ad.finite_diff_grad(lambda p: build(ad.Graph(record=False).bind(p)).item(), params)
    for k in params:
        tol = np.maximum(rel * np.maximum(np.abs(grads[k]), np.abs(fd[k])), floor)
        assert np.all(np.abs(grads[k] - fd[k]) <= tol), k


@pytest.mark.parametrize("fn,shapes", [
    (lambda a, b: a + b, [(3, 4), (4,)]),
    (lambda a, b: a - b, [(3, 1), (3, 4)]),
    (lambda a, b: a * b, [(2, 3), (2, 3)]),
    (lambda a, b: a * ad.exp(-b) / 2.0, [(2, 3), (2, 3)]),
    (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 5)]),
    (lambda a: ad.gelu(a), [(4, 3)]),
    (lambda a: ad.softplus(a), [(5,)]),
    (lambda a: ad.log(ad.exp(a) + 2.0), [(5,)]),
    (lambda a: ad.softmax(a, axis=-1), [(3, 4)]),
    (lambda a: ad.log_softmax(a, axis=0), [(3, 4)]),
    (lambda a: ad.norm(a, axis=-1), [(3, 4)]),
    (lambda a: ad.sq_norm(a, axis=0), [(3, 4)]),
    (lambda a: a.reshape((6, 2)).transpose(), [(3, 4)]),
    (lambda a: a.transpose((1, 0, 2)), [(2, 3, 4)]),
    (lambda a: a[np.array([0, 2, 0]), np.array([1, 1, 1])], [(3, 4)]),
    (lambda a: ad.mean(a, axis=1, keepdims=True), [(3, 4)]),
    (lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 1)]),
    (lambda a, g, b: ad.layer_norm(a, g, b), [(3, 5), (5,), (5,)]),
])
def test_op_gradients_match_finite_differences(fn, shapes):
    rng = np.random.default_rng(1)
    check_op(fn, *[rng.normal(size=s) for s in shapes])


def test_embedding_gradient_accumulates_repeated_ids():
    rng = np.random.default_rng(2)
    check_op(lambda t: ad.embedding(t, np.array([[0, 2, 2], [1, 0, 2]])), rng.normal(size=(4, 3)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
def test_matmul_value_matches_numpy(a, b):
    assert np.array_equal((ad.as_tensor(a) @ b).data, a @ b)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(ad.as_tensor(x), axis=-1).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 6), elements=finite))
def test_layer_norm_output_is_standardized_or_zero(x):
    y = ad.layer_norm(ad.as_tensor(x), np.ones(6), np.zeros(6)).data
    for row_in, row in zip(x, y):
        if np.ptp(row_in) == 0:
            assert np.all(row == 0)
        else:
            assert abs(row.mean()) < 1e-9


def test_layer_norm_constant_row_is_finite_and_zero():
    y = ad.layer_norm(ad.as_tensor(np.full((1, 4), 7.0)), np.ones(4), np.zeros(4)).data
    assert np.all(y == 0)


def test_untouched_params_get_zero_gradient():
    g = ad.Graph()
    P = g.bind({"a": np.ones(3), "b": np.ones(2)})
    _, grads = ad.value_and_grad(g, ad.tsum(P["a"] * 2.0))
    np.testing.assert_array_equal(grads["a"], 2.0)
    np.testing.assert_array_equal(grads["b"], 0.0)


def test_non_scalar_loss_rejected():
    g = ad.Graph()
    P = g.bind({"a": np.ones(3)})
    with pytest.raises(ad.ShapeError):
        ad.value_and_grad(g, P["a"] * 2.0)


def test_shape_mismatch_names_operation():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.as_tensor(np.ones((2, 3))) @ np.ones((2, 3))


def test_recording_off_graph_cannot_backprop():
    g = ad.Graph(record=False)
    P = g.bind({"a": np.ones(3)})
    with pytest.raises(ValueError):
        ad.value_and_grad(g, ad.tsum(P["a"]))


def test_finite_diff_of_quadratic_is_exact_enough():
    fd = ad.finite_diff_grad(lambda p: float((p["x"] ** 2).sum()), {"x": np.array([1.0, -2.0, 3.0])})
    np.testing.assert_allclose(fd["x"], [2.0, -4.0, 6.0], rtol=1e-8)
