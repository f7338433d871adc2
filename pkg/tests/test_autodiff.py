import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.special import erf

from surlonformer import autodiff as ad
from conftest import central_difference

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def grad_of(build, *arrays):
    """Analytic gradients of scalar ``build(*tensors)`` w.r.t. every array."""
    leaves = [ad.parameter(a, f"x{i}") for i, a in enumerate(arrays)]
    out = build(*leaves)
    return ad.backward(out, leaves)


def check_gradient(build, *arrays, tol=1e-6):
    grads = grad_of(build, *arrays)
    for i, a in enumerate(arrays):
        num = central_difference(
            lambda: build(*[ad.tensor(b) for b in arrays]).item(), a)
        np.testing.assert_allclose(grads[f"x{i}"], num, rtol=tol, atol=tol)


# forward semantics -----------------------------------------------------------

def test_gelu_uses_exact_erf():
    x = np.linspace(-4, 4, 33)
    expected = 0.5 * x * (1 + erf(x / math.sqrt(2)))
    np.testing.assert_allclose(ad.gelu(ad.tensor(x)).data, expected, rtol=0, atol=1e-15)


def test_masked_softmax_zeroes_hidden_entries():
    scores = ad.tensor([[1.0, 2.0, 3.0]])
    out = ad.masked_softmax(scores, np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out[0, [0, 2]], np.exp([1, 3]) / np.exp([1, 3]).sum())


def test_masked_softmax_fully_masked_row_is_an_error():
    with pytest.raises(ad.DegenerateRowError):
        ad.masked_softmax(ad.tensor(np.zeros((2, 2))), np.array([[True, True], [False, False]]))


def test_layer_norm_normalizes_last_axis(rng):
    x = rng.normal(3, 5, (4, 6))
    out = ad.layer_norm(ad.tensor(x), np.ones(6), np.zeros(6)).data
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-12)
    # biased variance plus eps=1e-5 in the denominator
    np.testing.assert_allclose(out.var(axis=1), x.var(axis=1) / (x.var(axis=1) + 1e-5), rtol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))


def test_non_finite_values_are_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.tensor([1.0, np.nan])
    with pytest.raises(ad.NonFiniteError):
        ad.exp(ad.tensor([1000.0]))


def test_dropout_identity_at_inference(rng):
    x = ad.tensor(rng.normal(size=(3, 4)))
    assert ad.dropout(x, 0.5, None) is x
    y = ad.dropout(x, 0.5, np.random.default_rng(0)).data
    kept = y != 0
    np.testing.assert_allclose(y[kept], 2 * x.data[kept])


# gradients against finite differences -------------------------------------------

def test_elementwise_gradients(rng):
    a, b = rng.uniform(0.5, 2, (3, 4)), rng.normal(size=(3, 4))
    check_gradient(lambda x, y: ad.sum_(ad.log(x) * ad.exp(y) + ad.square(x - y)), a, b)
    check_gradient(lambda x, y: ad.sum_(ad.reciprocal(x) * y), a, b)
    check_gradient(lambda x: ad.sum_(ad.gelu(x) * x), b)


def test_abs_gradient_away_from_zero():
    a = np.array([-2.0, -0.5, 0.7, 3.0])
    check_gradient(lambda x: ad.sum_(ad.abs_(x) * ad.tensor([1.0, 2.0, 3.0, 4.0])), a)


def test_abs_subgradient_at_zero_is_zero():
    g = grad_of(lambda x: ad.sum_(ad.abs_(x)), np.array([0.0, 1.0]))["x0"]
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_broadcast_gradients_are_summed(rng):
    x, b = rng.normal(size=(5, 3)), rng.normal(size=(3,))
    check_gradient(lambda x, b: ad.sum_(ad.square(x + b)), x, b)
    grads = grad_of(lambda x, b: ad.sum_(x + b), x, b)
    np.testing.assert_allclose(grads["x1"], np.full(3, 5.0))


def test_batched_matmul_gradient(rng):
    a, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    check_gradient(lambda a, w: ad.sum_(ad.square(ad.matmul(a, w))), a, w)


def test_softmax_and_layer_norm_gradients(rng):
    s = rng.normal(size=(2, 4, 4))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    weights = rng.normal(size=(2, 4, 4))
    check_gradient(lambda s: ad.sum_(ad.masked_softmax(s, mask) * ad.tensor(weights)), s)
    x, g, b = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    target = rng.normal(size=(3, 5))
    check_gradient(lambda x, g, b: ad.sum_(ad.layer_norm(x, g, b) * ad.tensor(target)), x, g, b)


def test_shape_op_gradients(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    w = rng.normal(size=(4, 3))
    check_gradient(lambda a, b: ad.sum_(ad.concat([a, b], axis=0) * ad.tensor(w)), a, b)
    check_gradient(lambda a, b: ad.sum_(ad.stack([a, b]) * ad.tensor(w.reshape(2, 2, 3))), a, b)
    check_gradient(lambda a: ad.sum_(ad.transpose(a) * ad.tensor(w[:3, :2])), a)
    check_gradient(lambda a: ad.sum_(ad.take(a, np.array([1, 1, 0])) * ad.tensor(w[:3])), a)
    check_gradient(lambda a: ad.mean(ad.square(ad.reshape(a, (3, 2)))), a)


def test_fan_out_accumulates():
    # f(x) = x*x + x -> f'(x) = 2x + 1
    g = grad_of(lambda x: ad.sum_(x * x + x), np.array([3.0]))["x0"]
    np.testing.assert_allclose(g, [7.0])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = ad.masked_softmax(ad.tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=finite), hnp.arrays(np.float64, (3,), elements=finite))
def test_linearity_of_backward(x, c):
    # d/dx sum(c * x) = c broadcast over rows
    g = grad_of(lambda x: ad.sum_(x * ad.tensor(c)), x.copy())["x0"]
    np.testing.assert_allclose(g, np.broadcast_to(c, x.shape))


# contract -------------------------------------------------------------------------

def test_backward_requires_scalar_root():
    with pytest.raises(ad.ContractError):
        ad.backward(ad.parameter(np.ones(3), "w"))


def test_unreachable_leaf_gets_exact_zero():
    w, u = ad.parameter(np.ones(2), "w"), ad.parameter(np.ones(3), "u")
    grads = ad.backward(ad.sum_(w * w), [w, u])
    np.testing.assert_array_equal(grads["u"], np.zeros(3))


def test_duplicate_leaf_names_rejected():
    a, b = ad.parameter(np.ones(2), "w"), ad.parameter(np.ones(2), "w")
    with pytest.raises(ad.ContractError):
        ad.backward(ad.sum_(a + b), [a, b])


def test_backward_discovers_named_leaves():
    w = ad.parameter(np.array([2.0]), "w")
    assert set(ad.backward(ad.sum_(w * ad.tensor([3.0])))) == {"w"}


# Adam --------------------------------------------------------------------------------

def test_adam_first_step_moves_by_lr_times_sign():
    state = ad.AdamState()
    new = ad.adam_step({"w": np.array([1.0, -1.0])}, {"w": np.array([0.3, -2.0])}, state, 0.1)
    # bias-corrected m/sqrt(v) = g/|g| on step one
    np.testing.assert_allclose(new["w"], [1.0 - 0.1, -1.0 + 0.1], rtol=1e-6)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(3)
    w = rng.normal(size=4)
    state = ad.AdamState()
    m = v = np.zeros(4)
    ref = w.copy()
    params = {"w": w}
    for t in range(1, 6):
        g = rng.normal(size=4)
        params = ad.adam_step(params, {"w": g}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(params["w"], ref, rtol=1e-12)


def test_adam_rejects_mismatched_keys():
    with pytest.raises(ad.ContractError):
        ad.adam_step({"w": np.ones(1)}, {"u": np.ones(1)}, ad.AdamState(), 0.1)
