import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onn.tensor import (
    PAD,
    broadcast_weights,
    col2im_accumulate,
    im2col,
    index_map,
    patches,
    patches_adjoint,
    vec,
    vec_inverse,
)


def sliding_windows(y, m, n):
    """Brute-force window extraction with explicit bounds checks."""
    M, N = y.shape
    rows = []
    for i in range(M):
        for j in range(N):
            row = []
            for u in range(m):
                for v in range(n):
                    r, c = i + u - m // 2, j + v - n // 2
                    row.append(y[r, c] if 0 <= r < M and 0 <= c < N else 0.0)
            rows.append(row)
    return np.array(rows)


def test_im2col_identity_kernel():
    y = np.array([[1.0, 2.0], [3.0, 4.0]])
    pm = im2col(y, (1, 1))
    assert pm.shape == (4, 1)
    np.testing.assert_array_equal(pm.values[:, 0], vec(y))
    np.testing.assert_array_equal(pm.index_map[:, 0], [0, 1, 2, 3])


def test_im2col_zero_image():
    pm = im2col(np.zeros((3, 3)), (3, 3))
    np.testing.assert_array_equal(pm.values, np.zeros((9, 9)))


@pytest.mark.parametrize("shape", [(1, 1), (2, 5), (5, 5), (7, 4), (7, 7)])
@pytest.mark.parametrize("kernel", [(1, 1), (3, 3), (5, 5), (1, 3)])
def test_im2col_matches_window_oracle(rng, shape, kernel):
    y = rng.normal(size=shape)
    pm = im2col(y, kernel)
    np.testing.assert_array_equal(pm.values, sliding_windows(y, *kernel))
    assert pm.source_shape == shape


def test_index_map_marks_padding():
    idx = index_map((3, 3), (3, 3))
    # top-left output pixel: first row and column of its window hang outside
    np.testing.assert_array_equal(idx[0], [PAD, PAD, PAD, PAD, 0, 1, PAD, 3, 4])
    np.testing.assert_array_equal(idx[4], np.arange(9))


@pytest.mark.parametrize("bad", [(2, 3), (3, 0), (4, 4)])
def test_even_or_empty_kernel_rejected(bad):
    with pytest.raises(ValueError):
        im2col(np.ones((4, 4)), bad)


@pytest.mark.parametrize("img", [np.zeros((0, 3)), np.zeros(5), np.zeros((2, 2, 2))])
def test_bad_images_rejected(img):
    with pytest.raises(ValueError):
        im2col(img, (3, 3))


def test_col2im_ones_identity_kernel():
    idx = index_map((2, 2), (1, 1))
    np.testing.assert_array_equal(col2im_accumulate(np.ones((4, 1)), idx, (2, 2)), np.ones((2, 2)))


def test_col2im_single_entry(rng):
    idx = index_map((4, 5), (3, 3))
    g = np.zeros(idx.shape)
    g[7, 4] = 2.5
    out = col2im_accumulate(g, idx, (4, 5))
    expected = np.zeros(20)
    expected[idx[7, 4]] = 2.5
    np.testing.assert_array_equal(out.reshape(-1), expected)


def test_col2im_drops_padding():
    idx = index_map((1, 1), (3, 3))
    out = col2im_accumulate(np.ones((1, 9)), idx, (1, 1))
    assert out[0, 0] == 1.0


def test_col2im_shape_mismatch():
    with pytest.raises(ValueError):
        col2im_accumulate(np.ones((4, 2)), index_map((2, 2), (1, 1)), (2, 2))


@settings(max_examples=60, deadline=None)
@given(
    M=st.integers(1, 7),
    N=st.integers(1, 7),
    k=st.sampled_from([(1, 1), (3, 3), (5, 5), (3, 1)]),
    seed=st.integers(0, 2**32 - 1),
)
def test_col2im_is_adjoint_of_im2col(M, N, k, seed):
    r = np.random.default_rng(seed)
    y = r.normal(size=(M, N))
    pm = im2col(y, k)
    G = r.normal(size=pm.shape)
    lhs = np.sum(col2im_accumulate(G, pm.index_map, (M, N)) * y)
    rhs = np.sum(G * pm.values)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_broadcast_weights():
    np.testing.assert_array_equal(broadcast_weights(np.array([[2.0]]), 3), [[2.0], [2.0], [2.0]])
    w = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(broadcast_weights(w, 1), [[1.0, 2.0, 3.0, 4.0]])


def test_broadcast_weights_rows_identical(rng):
    w = rng.normal(size=(3, 3))
    W = broadcast_weights(w, 25)
    assert W.shape == (25, 9)
    assert np.all(W == vec(w))
    with pytest.raises(ValueError):
        broadcast_weights(w, 0)


def test_vec_row_major():
    np.testing.assert_array_equal(vec([[1, 2], [3, 4]]), [1, 2, 3, 4])
    np.testing.assert_array_equal(vec_inverse(np.arange(1, 7), (2, 3)), [[1, 2, 3], [4, 5, 6]])


def test_vec_round_trip(rng):
    t = rng.normal(size=(3, 4, 2))
    back = vec_inverse(vec(t), t.shape)
    assert np.array_equal(back, t)
    with pytest.raises(ValueError):
        vec_inverse(np.ones(5), (2, 3))


@pytest.mark.parametrize("kernel", [(1, 1), (3, 3), (3, 5)])
def test_batched_patches_agree_with_im2col(rng, kernel):
    x = rng.normal(size=(2, 3, 5, 6))
    P = patches(x, kernel)
    assert P.shape == (2, 30, 3, kernel[0] * kernel[1])
    for b in range(2):
        for a in range(3):
            np.testing.assert_array_equal(P[b, :, a, :], im2col(x[b, a], kernel).values)


def test_batched_patches_adjoint(rng):
    x = rng.normal(size=(2, 2, 4, 5))
    G = rng.normal(size=(2, 20, 2, 9))
    lhs = np.sum(patches_adjoint(G, (3, 3), (4, 5)) * x)
    rhs = np.sum(G * patches(x, (3, 3)))
    assert lhs == pytest.approx(rhs, rel=1e-12)
