import math

import numpy as np
import pytest

from onn.optim import SGD, Adam, VarianceAdam, make_optimizer


def scalar_adam(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, centred=False):
    """Reference recursion on one scalar parameter starting at 0."""
    p = m = v = mu = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        if centred:
            mu = b2 * mu + (1 - b2) * g
            v = b2 * v + (1 - b2) * (g - mu) ** 2
        else:
            v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


def run(opt_cls, grads, **kw):
    p = np.zeros(1)
    opt = opt_cls([p], **kw)
    trace = []
    for g in grads:
        opt.step([np.array([g])])
        trace.append(p[0])
    return trace


def test_sgd_step():
    p = np.array([1.0])
    SGD([p], lr=0.1).step([np.array([0.5])])
    assert p[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_converges_on_quadratic():
    p = np.array([5.0])
    opt = SGD([p], lr=0.1)
    for _ in range(200):
        opt.step([2 * (p - 3.0)])
    assert p[0] == pytest.approx(3.0, abs=1e-12)


def test_adam_first_step_is_lr():
    p = np.zeros(3)
    Adam([p]).step([np.ones(3)])
    np.testing.assert_allclose(p, -1e-3 / (1 + 1e-8), rtol=1e-12)


@pytest.mark.parametrize("cls,centred", [(Adam, False), (VarianceAdam, True)])
def test_matches_scalar_reference(rng, cls, centred):
    grads = rng.normal(size=100)
    np.testing.assert_allclose(run(cls, grads), scalar_adam(grads, centred=centred), rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("name", ["sgd", "adam", "vadam"])
def test_zero_gradients_leave_parameters(name):
    p = np.array([0.3, -1.2])
    opt = make_optimizer(name, [p])
    for _ in range(20):
        opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p, [0.3, -1.2])


def test_variance_adam_outpaces_adam_on_constant_gradient():
    grads = [0.7] * 50
    va, a = run(VarianceAdam, grads), run(Adam, grads)
    assert abs(va[-1] - va[-2]) >= abs(a[-1] - a[-2])


def test_variance_adam_stable_on_alternating_gradients():
    p = np.zeros(1)
    opt = VarianceAdam([p])
    prev, worst = 0.0, 0.0
    for t in range(10_000):
        opt.step([np.array([1.0 if t % 2 == 0 else -1.0])])
        assert np.isfinite(p[0])
        worst = max(worst, abs(p[0] - prev))
        prev = p[0]
    assert worst < 0.05


def test_shape_mismatch_and_unknown_optimizer():
    p = np.zeros(2)
    with pytest.raises(ValueError):
        Adam([p]).step([np.zeros(3)])
    with pytest.raises(ValueError):
        Adam([p]).step([])
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", [p])
