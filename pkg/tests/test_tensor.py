import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import full_attention_oracle, naive_matmul, naive_qk
from rettention import NumericError, ShapeError, matmul_av, row_softmax, scaled_qk


def test_scaled_qk_orthonormal_rows():
    eye = np.eye(4)[None]
    a_pre = scaled_qk(eye, eye, 4)
    np.testing.assert_array_equal(a_pre, 0.5 * eye)


def test_scaled_qk_zero_query():
    q = np.zeros((2, 5, 3))
    k = np.random.default_rng(0).normal(size=(2, 5, 3))
    assert np.all(scaled_qk(q, k, 3) == 0.0)


def test_scaled_qk_matches_triple_loop(rng):
    q, k = rng.normal(size=(2, 2, 5, 3))
    np.testing.assert_allclose(scaled_qk(q, k, 3), naive_qk(q, k, 1 / math.sqrt(3)), rtol=0, atol=1e-12)


@pytest.mark.parametrize(
    "q_shape, k_shape, d_h",
    [((2, 5, 3), (2, 5, 4), 3), ((2, 5, 3), (1, 5, 3), 3), ((2, 5, 3), (2, 5, 3), 4), ((5, 3), (5, 3), 3)],
)
def test_scaled_qk_shape_errors(q_shape, k_shape, d_h):
    with pytest.raises(ShapeError):
        scaled_qk(np.zeros(q_shape), np.zeros(k_shape), d_h)


def test_row_softmax_uniform_row():
    a, stats = row_softmax(np.full((1, 1, 4), 3.7))
    np.testing.assert_allclose(a[0, 0], [0.25] * 4, rtol=0, atol=1e-15)
    assert stats.row_max[0, 0] == 3.7
    assert stats.row_sum[0, 0] == 4.0


def test_row_softmax_log_values():
    a, _ = row_softmax(np.log([[[1.0, 2.0, 3.0, 4.0]]]))
    np.testing.assert_allclose(a[0, 0], [0.1, 0.2, 0.3, 0.4], rtol=0, atol=1e-15)


def test_row_softmax_rows_sum_to_one(rng):
    a, stats = row_softmax(rng.normal(scale=5.0, size=(2, 8, 8)))
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, rtol=0, atol=1e-9)
    assert np.all(stats.row_sum >= 1.0)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_row_softmax_rejects_non_finite(bad):
    x = np.zeros((1, 2, 2))
    x[0, 1, 0] = bad
    with pytest.raises(NumericError):
        row_softmax(x)


def test_row_softmax_extreme_logits_stay_finite():
    a, _ = row_softmax(np.array([[[1000.0, 999.0, -1000.0]]]))
    assert np.all(np.isfinite(a))
    np.testing.assert_allclose(a.sum(), 1.0)


def test_matmul_identity_and_uniform(rng):
    v = rng.normal(size=(2, 6, 4))
    np.testing.assert_array_equal(matmul_av(np.broadcast_to(np.eye(6), (2, 6, 6)), v), v)
    avg = matmul_av(np.full((2, 6, 6), 1 / 6), v)
    np.testing.assert_allclose(avg, np.broadcast_to(v.mean(axis=1, keepdims=True), v.shape), atol=1e-15)


def test_matmul_matches_triple_loop(rng):
    a = rng.random((2, 6, 6))
    v = rng.normal(size=(2, 6, 4))
    np.testing.assert_allclose(matmul_av(a, v), naive_matmul(a, v), rtol=0, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul_av(np.zeros((2, 6, 6)), np.zeros((2, 5, 4)))


shapes = st.tuples(st.integers(1, 4), st.integers(1, 16), st.integers(1, 8))


@settings(max_examples=40, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**32 - 1), shift=st.floats(-50, 50))
def test_softmax_shift_invariance(shape, seed, shift):
    h, T, _ = shape
    x = np.random.default_rng(seed).normal(size=(h, T, T))
    c = shift * np.random.default_rng(seed + 1).random((h, T, 1))
    a0, _ = row_softmax(x)
    a1, _ = row_softmax(x + c)
    np.testing.assert_allclose(a1, a0, rtol=0, atol=1e-9)
    np.testing.assert_allclose(a0.sum(axis=-1), 1.0, rtol=0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**32 - 1))
def test_composition_matches_full_attention_oracle(shape, seed):
    h, T, d = shape
    q, k, v = np.random.default_rng(seed).normal(size=(3, h, T, d))
    a, _ = row_softmax(scaled_qk(q, k, d))
    np.testing.assert_allclose(matmul_av(a, v), full_attention_oracle(q, k, v, 1 / math.sqrt(d)), rtol=0, atol=1e-9)
