"""First-order update rules over lists of numpy parameter arrays.

Parameters are updated in place.
"""

from __future__ import annotations

import numpy as np


def _check(params, grads):
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")


class SGD:
    def __init__(self, params, lr=1e-3):
        self.params = params
        self.lr = lr
        self.t = 0

    def step(self, grads):
        _check(self.params, grads)
        self.t += 1
        for p, g in zip(self.params, grads):
            p -= self.lr * g


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def _second_moment(self, i, g):
        self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
        return self.v[i]

    def step(self, grads):
        _check(self.params, grads)
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            v = self._second_moment(i, g)
            p -= self.lr * (self.m[i] / c1) / (np.sqrt(v / c2) + self.eps)


class VarianceAdam(Adam):
    """Adam whose denominator tracks the gradient variance instead of its raw
    second moment.

    A running mean ``mu`` (decay ``beta2``) centres each gradient before it
    enters the second-moment average:

        mu_t = beta2 * mu_{t-1} + (1 - beta2) * g
        v_t  = beta2 * v_{t-1}  + (1 - beta2) * (g - mu_t)**2
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr, beta1, beta2, eps)
        self.mu = [np.zeros_like(p) for p in params]

    def _second_moment(self, i, g):
        self.mu[i] = self.beta2 * self.mu[i] + (1 - self.beta2) * g
        d = g - self.mu[i]
        self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * d * d
        return self.v[i]


OPTIMIZERS = {"sgd": SGD, "adam": Adam, "vadam": VarianceAdam}


def make_optimizer(name, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    try:
        cls = OPTIMIZERS[name]
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; choose from {sorted(OPTIMIZERS)}") from None
    if cls is SGD:
        return SGD(params, lr)
    return cls(params, lr, beta1, beta2, eps)
