import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from onn.metrics import mean_psnr, psnr


def test_uniform_error_tenth_is_twenty_db():
    target = np.full((60, 60), 0.3)
    assert abs(psnr(target + 0.1, target) - 20.0) <= 1e-9


def test_identical_images_infinite():
    img = np.linspace(0, 1, 16).reshape(4, 4)
    assert psnr(img, img) == math.inf


def test_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))


@pytest.mark.parametrize("max_val, err, expected", [(1.0, 1.0, 0.0), (1.0, 0.01, 40.0), (255.0, 2.55, 40.0)])
def test_known_values(max_val, err, expected):
    t = np.zeros((5, 5))
    assert psnr(t + err, t, max_val) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 4), elements=st.floats(0, 1)), arrays(np.float64, (4, 4), elements=st.floats(0, 1)))
def test_symmetric(a, b):
    assert psnr(a, b) == psnr(b, a)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6,), elements=st.floats(0.01, 0.5)), st.floats(1.01, 3.0))
def test_larger_error_lower_psnr(err, scale):
    t = np.zeros(6)
    assert psnr(t + err * scale, t) < psnr(t + err, t)


def test_mean_is_over_images_not_pixels():
    target = np.zeros((2, 4, 4))
    pred = np.stack([np.full((4, 4), 0.1), np.full((4, 4), 0.01)])
    assert mean_psnr(pred, target) == pytest.approx(30.0)
    assert psnr(pred, target) < 30.0  # pooled MSE is dominated by the worse image
