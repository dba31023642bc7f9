import math

import numpy as np
import pytest

from onn import operators as ops
from onn.operators import (
    CONV,
    EXP_CLAMP,
    NODAL,
    OperatorSet,
    activation_backward,
    activation_forward,
    default_library,
    nodal_backward,
    nodal_forward,
    parse_library,
    pool_backward,
    pool_forward,
    pool_select,
)
from onn.tensor import broadcast_weights, im2col

# independent scalar definitions
SCALAR = {
    "mul": lambda y, w: w * y,
    "cubic": lambda y, w: w * y**3,
    "sin": lambda y, w: math.sin(w * y),
    "exp": lambda y, w: math.exp(w * y) - 1.0,
    "sinh": lambda y, w: math.sinh(w * y),
    "sinc": lambda y, w: 1.0 if w * y == 0 else math.sin(w * y) / (w * y),
    "chirp": lambda y, w: math.sin(w * y * y),
    "log": lambda y, w: math.copysign(1.0, y) * w * math.log(1.0 + abs(y)) if y else 0.0,
}


@pytest.mark.parametrize("name", sorted(NODAL))
def test_nodal_matches_scalar_definition(rng, name):
    y = rng.uniform(-2, 2, size=200)
    w = rng.uniform(-2, 2, size=200)
    got = nodal_forward(name, y, w)
    want = np.array([SCALAR[name](a, b) for a, b in zip(y, w)])
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize("name", sorted(NODAL))
def test_nodal_partials_match_finite_differences(rng, name):
    y = rng.uniform(-2, 2, size=1000)
    w = rng.uniform(-2, 2, size=1000)
    if name == "log":
        y = np.where(np.abs(y) < 1e-3, 0.5, y)  # |y| kink
    h = 1e-6
    op = NODAL[name]
    fd_y = (op.eval(y + h, w) - op.eval(y - h, w)) / (2 * h)
    fd_w = (op.eval(y, w + h) - op.eval(y, w - h)) / (2 * h)
    dy, dw = op.d_dy(y, w), op.d_dw(y, w)
    scale_y = np.maximum(np.abs(dy), 1.0)
    scale_w = np.maximum(np.abs(dw), 1.0)
    assert np.max(np.abs(dy - fd_y) / scale_y) < 1e-6
    assert np.max(np.abs(dw - fd_w) / scale_w) < 1e-6


def test_nodal_examples():
    assert nodal_forward("mul", [[2.0]], [[3.0]])[0, 0] == 6.0
    assert nodal_forward("sin", [[0.0]], [[1.7]])[0, 0] == 0.0
    assert nodal_forward("sinc", [[0.0]], [[3.0]])[0, 0] == 1.0
    dy, dw = nodal_backward("mul", [[2.0]], [[3.0]], [[1.0]])
    assert (dy[0, 0], dw[0, 0]) == (3.0, 2.0)
    dy, dw = nodal_backward("cubic", [[1.0]], [[2.0]], [[1.0]])
    assert (dy[0, 0], dw[0, 0]) == (6.0, 1.0)


def test_nodal_shape_mismatch():
    with pytest.raises(ValueError):
        nodal_forward("mul", np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        nodal_backward("mul", np.ones((2, 3)), np.ones((2, 3)), np.ones(3))


@pytest.mark.parametrize("name", ["sinc", "log"])
def test_singular_points_finite(name):
    y = np.array([0.0, 0.0, 1e-300, -1e-300, 1e-4])
    w = np.array([0.0, 2.0, 1.0, 1.0, 1e-4])
    op = NODAL[name]
    for f in (op.eval, op.d_dy, op.d_dw):
        assert np.all(np.isfinite(f(y, w)))
    if name == "sinc":
        assert op.d_dy(np.array([0.0]), np.array([1.0]))[0] == 0.0


@pytest.mark.parametrize("name", ["exp", "sinh"])
def test_exp_family_saturates(name):
    op = NODAL[name]
    y, w = np.array([100.0, -100.0]), np.array([1.0, 1.0])
    z = op.eval(y, w)
    assert np.all(np.isfinite(z))
    assert z[0] == op.eval(np.array([EXP_CLAMP]), np.array([1.0]))[0]
    np.testing.assert_array_equal(op.d_dy(y, w), [0.0, 0.0])
    np.testing.assert_array_equal(op.d_dw(y, w), [0.0, 0.0])


def test_pool_examples():
    Z = np.array([[1.0, 2.0, 3.0]])
    assert pool_forward("sum", Z)[0] == 6.0
    assert pool_forward("median", np.array([[1.0, 5.0, 3.0]]))[0] == 3.0
    g = pool_backward("max", np.array([[1.0, 5.0, 3.0]]), np.array([2.0]), np.array([1]))
    np.testing.assert_array_equal(g, [[0.0, 2.0, 0.0]])
    Z = np.array([[1.0, 5.0, 3.0]])
    _, sel = pool_select("median", Z)
    np.testing.assert_array_equal(pool_backward("median", Z, np.array([2.0]), sel), [[0.0, 0.0, 2.0]])
    np.testing.assert_array_equal(pool_backward("sum", Z, np.array([4.0])), [[4.0, 4.0, 4.0]])


def test_median_even_rows_take_lower_middle():
    assert pool_forward("median", np.array([[4.0, 1.0, 3.0, 2.0]]))[0] == 2.0


def test_ties_break_to_lowest_column():
    Z = np.array([[2.0, 7.0, 7.0, 1.0], [5.0, 5.0, 5.0, 5.0]])
    _, sel = pool_select("max", Z)
    np.testing.assert_array_equal(sel, [1, 0])
    Z = np.array([[3.0, 1.0, 3.0, 9.0, 3.0]])
    x, sel = pool_select("median", Z)
    assert x[0] == 3.0 and sel[0] == 0


def test_select_pool_backward_needs_record():
    with pytest.raises(ValueError):
        pool_backward("median", np.ones((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        pool_forward("sum", np.ones((2, 0)))


@pytest.mark.parametrize("name", ["sum", "median", "max"])
def test_pool_backward_sparsity_and_finite_differences(rng, name):
    Z = rng.normal(size=(50, 9))
    g = rng.normal(size=50)
    x, sel = pool_select(name, Z)
    grad = pool_backward(name, Z, g, sel)
    nonzero = np.count_nonzero(grad, axis=1)
    assert np.all(nonzero == (9 if name == "sum" else 1))
    h = 1e-7
    for i, j in [(0, 0), (3, 4), (17, 8)]:
        Zp, Zm = Z.copy(), Z.copy()
        Zp[i, j] += h
        Zm[i, j] -= h
        fd = (pool_forward(name, Zp)[i] - pool_forward(name, Zm)[i]) / (2 * h) * g[i]
        assert grad[i, j] == pytest.approx(fd, abs=1e-6)


def test_activation_examples():
    assert activation_forward("tanh", 0.0) == 0.0
    assert activation_backward("tanh", 0.0, 1.0) == 1.0
    assert activation_forward("lincut", 2.5) == 1.0
    assert activation_backward("lincut", 2.5, 1.0) == 0.0
    assert activation_backward("lincut", 1.0, 1.0) == 1.0
    np.testing.assert_array_equal(activation_forward("identity", [-3.0, 4.0]), [-3.0, 4.0])


@pytest.mark.parametrize("name", ["tanh", "lincut", "identity"])
def test_activation_derivative_finite_differences(rng, name):
    x = rng.uniform(-3, 3, size=1000)
    x = x[np.abs(np.abs(x) - 1.0) > 1e-3]
    h = 1e-6
    fd = (activation_forward(name, x + h) - activation_forward(name, x - h)) / (2 * h)
    np.testing.assert_allclose(activation_backward(name, x, np.ones_like(x)), fd, rtol=1e-6, atol=1e-8)


def test_conv_set_reproduces_convolution(rng):
    y = rng.normal(size=(7, 7))
    w = rng.normal(size=(3, 3))
    pm = im2col(y, (3, 3))
    got = pool_forward("sum", nodal_forward("mul", pm.values, broadcast_weights(w, 49))).reshape(7, 7)
    pad = np.pad(y, 1)
    want = np.zeros((7, 7))
    for i in range(7):
        for j in range(7):
            # sliding dot product (correlation orientation)
            for u in range(3):
                for v in range(3):
                    want[i, j] += w[u, v] * pad[i + u, j + v]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_operator_set_validation_and_names():
    theta = OperatorSet("cubic", "median", "tanh")
    assert str(theta) == "cubic-median-tanh"
    assert OperatorSet.parse("cubic-median-tanh") == theta
    assert str(CONV) == "mul-sum-identity"
    with pytest.raises(KeyError):
        OperatorSet("cube", "sum", "tanh")
    with pytest.raises(ValueError):
        OperatorSet.parse("mul-sum")


def test_default_library():
    lib = default_library()
    assert len(lib) == 8 * 3 * 3
    assert lib == sorted(set(lib))


def test_parse_library_wildcards():
    lib = parse_library("sin-*-tanh, mul-sum-identity")
    assert [str(t) for t in lib] == ["mul-sum-identity", "sin-max-tanh", "sin-median-tanh", "sin-sum-tanh"]
    assert len(parse_library("*-*-*")) == 72
    with pytest.raises(ValueError):
        parse_library(" , ")
    with pytest.raises(KeyError):
        parse_library("foo-sum-tanh")


def test_lookup_unknown_ids():
    with pytest.raises(KeyError):
        ops.nodal("nope")
    with pytest.raises(KeyError):
        ops.pool("mean")
