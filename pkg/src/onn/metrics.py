"""Image quality metrics."""

from __future__ import annotations

import math

import numpy as np


def psnr(pred, target, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are equal."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def mean_psnr(pred, target, max_val: float = 1.0) -> float:
    """Mean of per-image PSNR over the leading axis."""
    return float(np.mean([psnr(p, t, max_val) for p, t in zip(pred, target)]))
