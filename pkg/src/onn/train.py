"""Mini-batch training loop shared by SPM probes and the denoising protocol.

Images live in [0, 1] outside the network and in [-1, 1] inside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .metrics import mean_psnr
from .network import NetworkSpec, NetworkState, mse_loss, network_backward, network_forward
from .optim import make_optimizer


class Divergence(FloatingPointError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 10
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class History:
    loss: list = field(default_factory=list)  # per epoch, mean over batches
    train_psnr: list = field(default_factory=list)  # per epoch, from the in-epoch outputs
    iterations: int = 0


def to_internal(img):
    return 2.0 * np.asarray(img, dtype=np.float64) - 1.0


def from_internal(x):
    return np.clip((np.asarray(x) + 1.0) / 2.0, 0.0, 1.0)


def predict(spec: NetworkSpec, state: NetworkState, noisy, batch_size: int = 25) -> np.ndarray:
    """Denoise a stack (n, M, N) of [0, 1] images; returns [0, 1] images."""
    noisy = np.asarray(noisy, dtype=np.float64)
    out = np.empty_like(noisy)
    for s in range(0, len(noisy), batch_size):
        y, _ = network_forward(to_internal(noisy[s:s + batch_size])[:, None], spec, state)
        out[s:s + batch_size] = from_internal(y[:, 0])
    return out


def fit(
    spec: NetworkSpec,
    state: NetworkState,
    noisy,
    clean,
    config: TrainConfig,
    rng: np.random.Generator,
    max_iterations: Optional[int] = None,
    on_step: Optional[Callable[[int, NetworkState], None]] = None,
    grad_hook: Optional[Callable[[list], None]] = None,
) -> History:
    """Train ``state`` in place with MSE on (noisy -> clean) pairs.

    Runs ``config.epochs`` epochs, or stops after ``max_iterations`` optimizer
    steps if given. ``on_step(t, state)`` runs after step t (and once with
    t = 0 before training). ``grad_hook`` may edit gradients in place.
    Raises ``Divergence`` on a non-finite loss.
    """
    X = to_internal(noisy)[:, None]
    T = to_internal(clean)[:, None]
    clean = np.asarray(clean, dtype=np.float64)
    n = len(X)
    params = state.parameters()
    opt = make_optimizer(config.optimizer, params, config.lr, config.beta1, config.beta2, config.eps)
    hist = History()
    if on_step is not None:
        on_step(0, state)
    epochs = config.epochs if max_iterations is None else max(1, -(-max_iterations * config.batch_size // n))
    for _ in range(epochs):
        order = rng.permutation(n)
        losses, scores = [], []
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            out, trace = network_forward(X[idx], spec, state)
            loss, grad = mse_loss(out, T[idx])
            if not np.isfinite(loss):
                raise Divergence(f"non-finite loss at iteration {hist.iterations + 1}")
            grads, _ = network_backward(trace, state, grad)
            if grad_hook is not None:
                grad_hook(grads)
            opt.step(grads)
            state.touch()
            hist.iterations += 1
            losses.append(loss)
            scores.append(mean_psnr(from_internal(out[:, 0]), clean[idx]))
            if on_step is not None:
                on_step(hist.iterations, state)
            if max_iterations is not None and hist.iterations >= max_iterations:
                break
        hist.loss.append(float(np.mean(losses)))
        hist.train_psnr.append(float(np.mean(scores)))
        if max_iterations is not None and hist.iterations >= max_iterations:
            break
    if not all(np.all(np.isfinite(p)) for p in params):
        raise Divergence("non-finite parameters after training")
    return hist
