import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krontime.tensor import (
    batched_matmul,
    mode_flatten,
    mode_fold,
    ravel_offset,
    row_softmax,
)
from oracles import matmul_loops


def test_flatten_last_mode_is_identity_layout():
    t = np.arange(6, dtype=float).reshape(2, 3, 1)
    m = mode_flatten(t, 1)
    assert m.shape == (2, 3, 1)
    np.testing.assert_array_equal(m[..., 0], [[0, 1, 2], [3, 4, 5]])


def test_flatten_first_mode():
    t = np.arange(6, dtype=float).reshape(2, 3, 1)
    m = mode_flatten(t, 0)
    assert m.shape == (3, 2, 1)
    np.testing.assert_array_equal(m[..., 0], [[0, 3], [1, 4], [2, 5]])


def test_fold_inverts_flatten_4mode():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(3, 4, 5, 2))
    for mode in range(3):
        back = mode_fold(mode_flatten(t, mode), mode, t.shape)
        assert np.array_equal(back, t)


def test_fold_single_batch_matrix():
    mat = np.arange(12.0).reshape(1, 6, 2)
    np.testing.assert_array_equal(mode_fold(mat, 0, (6, 2)), mat[0])


def test_fold_shape_mismatch():
    with pytest.raises(ValueError):
        mode_fold(np.zeros((2, 3, 1)), 0, (4, 2, 1))


def test_flatten_errors():
    with pytest.raises(ValueError):
        mode_flatten(np.zeros((4,)), 0)
    with pytest.raises(ValueError):
        mode_flatten(np.zeros((2, 3, 1)), 2)


def test_flatten_with_leading_axes_matches_per_item():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(2, 3, 4, 2, 5))
    m = mode_flatten(t, 1, batch_dims=2)
    assert m.shape == (2, 3, 4, 2, 5)
    for a in range(2):
        for b in range(3):
            np.testing.assert_array_equal(m[a, b], mode_flatten(t[a, b], 1))
    np.testing.assert_array_equal(mode_fold(m, 1, t.shape, batch_dims=2), t)


@settings(max_examples=120, deadline=None)
@given(
    shape=st.lists(st.integers(1, 4), min_size=1, max_size=4),
    d=st.integers(1, 3),
    seed=st.integers(0, 2**31 - 1),
    data=st.data(),
)
def test_flatten_fold_roundtrip_property(shape, d, seed, data):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(*shape, d))
    mode = data.draw(st.integers(0, len(shape) - 1))
    m = mode_flatten(t, mode)
    assert m.shape == (math.prod(shape) // shape[mode], shape[mode], d)
    assert np.array_equal(mode_fold(m, mode, t.shape), t)


@settings(max_examples=100, deadline=None)
@given(shape=st.lists(st.integers(1, 5), min_size=1, max_size=4), seed=st.integers(0, 10_000))
def test_row_major_offset_property(shape, seed):
    rng = np.random.default_rng(seed)
    idx = tuple(int(rng.integers(0, n)) for n in shape)
    buf = np.zeros(math.prod(shape))
    off = ravel_offset(shape, idx)
    buf[off] = 7.5
    assert buf.reshape(shape)[idx] == 7.5
    assert off == np.ravel_multi_index(idx, shape)


def test_batched_matmul_identity_and_scalar():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(3, 4, 4))
    np.testing.assert_array_equal(batched_matmul(np.broadcast_to(np.eye(4), (3, 4, 4)), m), m)
    a = rng.normal(size=(5, 1, 1))
    b = rng.normal(size=(5, 1, 1))
    np.testing.assert_array_equal(batched_matmul(a, b), a * b)


def test_batched_matmul_2x2_against_loops():
    a = np.array([[[1.5, -2.0], [0.25, 3.0]]])
    b = np.array([[[4.0, 1.0], [-1.0, 0.5]]])
    np.testing.assert_allclose(batched_matmul(a, b)[0], matmul_loops(a[0], b[0]), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_batched_matmul_random_against_loops(seed):
    rng = np.random.default_rng(seed)
    p, q, r = rng.integers(1, 9, size=3)
    a = rng.normal(size=(2, p, q))
    b = rng.normal(size=(2, q, r))
    out = batched_matmul(a, b)
    for i in range(2):
        np.testing.assert_allclose(out[i], matmul_loops(a[i], b[i]), atol=1e-12)


def test_batched_matmul_broadcast_and_errors():
    a = np.ones((1, 2, 3))
    b = np.ones((4, 3, 2))
    assert batched_matmul(a, b).shape == (4, 2, 2)
    with pytest.raises(ValueError):
        batched_matmul(np.ones((2, 2, 3)), np.ones((2, 2, 3)))
    with pytest.raises(ValueError):
        batched_matmul(np.ones((2, 2, 3)), np.ones((3, 3, 2)))


def test_batched_matmul_reproducible():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(4, 16, 16))
    b = rng.normal(size=(4, 16, 16))
    assert np.array_equal(batched_matmul(a, b), batched_matmul(a, b))


def test_softmax_closed_forms():
    np.testing.assert_allclose(row_softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])
    np.testing.assert_allclose(row_softmax(np.array([[math.log(2), 0.0]])), [[2 / 3, 1 / 3]])
    out = row_softmax(np.array([[1000.0, 1000.0]]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[0.5, 0.5]])


def test_softmax_mask_and_errors():
    out = row_softmax(np.array([[1.0, 5.0, 2.0]]), mask=np.array([[True, False, True]]))
    assert out[0, 1] == 0.0
    np.testing.assert_allclose(out.sum(), 1.0)
    with pytest.raises(ValueError):
        row_softmax(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        row_softmax(np.array([[1.0, 2.0]]), mask=np.array([[False, False]]))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 50.0))
def test_softmax_rows_sum_to_one(seed, scale):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4, 7)) * scale
    out = row_softmax(x)
    assert np.all(np.abs(out.sum(-1) - 1) <= 1e-6)
    assert np.all((out >= 0) & (out <= 1))
