"""Nodal, pool and activation operators with the partials backprop needs.

Every function is elementwise or row-wise over numpy arrays of any leading
shape. Nodal operators take one trainable weight per synapse; those of the
form ``w * g(y)`` are flagged separable so layers can use a GEMM fast path.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

EXP_CLAMP = 20.0
_SINC_SERIES = 1e-3


@dataclass(frozen=True)
class NodalOp:
    name: str
    # (y, w) -> z
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    # (y, w) -> (dz/dy, dz/dw)
    partials: Callable[[np.ndarray, np.ndarray], tuple]
    # for separable ops z = w * feature(y): (feature, feature')
    feature: Optional[Callable[[np.ndarray], np.ndarray]] = None
    feature_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def separable(self) -> bool:
        return self.feature is not None

    def eval(self, y, w):
        return self.fn(np.asarray(y, dtype=np.float64), np.asarray(w, dtype=np.float64))

    def d_dy(self, y, w):
        return self.partials(np.asarray(y, dtype=np.float64), np.asarray(w, dtype=np.float64))[0]

    def d_dw(self, y, w):
        return self.partials(np.asarray(y, dtype=np.float64), np.asarray(w, dtype=np.float64))[1]


def _separable(name, g, dg):
    def fn(y, w):
        return w * g(y)

    def partials(y, w):
        return w * dg(y), np.broadcast_to(g(y), np.broadcast(y, w).shape)

    return NodalOp(name, fn, partials, g, dg)


def _of_product(name, h, dh, square_input=False):
    """Nodal op ``h(w * y)`` (or ``h(w * y**2)``) with derivative ``dh``."""

    def fn(y, w):
        return h(w * (y * y if square_input else y))

    def partials(y, w):
        if square_input:
            y2 = y * y
            d = dh(w * y2)
            return d * (2.0 * w * y), d * y2
        d = dh(w * y)
        return d * w, d * y

    return NodalOp(name, fn, partials)


def _clamped_exp(u):
    return np.exp(np.clip(u, -EXP_CLAMP, EXP_CLAMP))


def _exp_grad(u):
    return np.where(np.abs(u) <= EXP_CLAMP, _clamped_exp(u), 0.0)


def _sinh(u):
    return np.sinh(np.clip(u, -EXP_CLAMP, EXP_CLAMP))


def _sinh_grad(u):
    return np.where(np.abs(u) <= EXP_CLAMP, np.cosh(np.clip(u, -EXP_CLAMP, EXP_CLAMP)), 0.0)


def _sinc(u):
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < _SINC_SERIES
    safe = np.where(small, 1.0, u)
    u2 = u * u
    return np.where(small, 1.0 - u2 / 6.0 + u2 * u2 / 120.0, np.sin(safe) / safe)


def _sinc_grad(u):
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < _SINC_SERIES
    safe = np.where(small, 1.0, u)
    series = -u / 3.0 + u * u * u / 30.0
    return np.where(small, series, (safe * np.cos(safe) - np.sin(safe)) / (safe * safe))


def _signed_log(y):
    return np.sign(y) * np.log1p(np.abs(y))


def _signed_log_grad(y):
    return 1.0 / (1.0 + np.abs(y))


NODAL: dict[str, NodalOp] = {
    op.name: op
    for op in (
        _separable("mul", lambda y: y, np.ones_like),
        _separable("cubic", lambda y: y * y * y, lambda y: 3.0 * y * y),
        _of_product("sin", np.sin, np.cos),
        _of_product("exp", lambda u: np.expm1(np.clip(u, -EXP_CLAMP, EXP_CLAMP)), _exp_grad),
        _of_product("sinh", _sinh, _sinh_grad),
        _of_product("sinc", _sinc, _sinc_grad),
        _of_product("chirp", np.sin, np.cos, square_input=True),
        _separable("log", _signed_log, _signed_log_grad),
    )
}


def nodal_forward(op, Y, W) -> np.ndarray:
    op = nodal(op)
    Y, W = np.asarray(Y, dtype=np.float64), np.asarray(W, dtype=np.float64)
    if Y.shape != W.shape:
        raise ValueError(f"patch matrix {Y.shape} and weight matrix {W.shape} differ")
    return op.fn(Y, W)


def nodal_backward(op, Y, W, upstream):
    op = nodal(op)
    Y, W = np.asarray(Y, dtype=np.float64), np.asarray(W, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if not (Y.shape == W.shape == upstream.shape):
        raise ValueError("Y, W and upstream must share a shape")
    dy, dw = op.partials(Y, W)
    return upstream * dy, upstream * dw


# -- pools --------------------------------------------------------------------

@dataclass(frozen=True)
class PoolOp:
    name: str
    selects: bool  # routes gradient to one element per row


POOL: dict[str, PoolOp] = {
    "sum": PoolOp("sum", False),
    "median": PoolOp("median", True),
    "max": PoolOp("max", True),
}


def pool_select(op, Z: np.ndarray):
    """Row-wise aggregation over the last axis.

    Returns ``(x, selected)``; ``selected`` is the column index feeding each
    output for median/max (lowest column on ties) and ``None`` for sum. Median
    of an even-length row is the lower-middle order statistic.
    """
    op = pool(op)
    if Z.shape[-1] < 1:
        raise ValueError("cannot pool empty rows")
    if op.name == "sum":
        return Z.sum(axis=-1), None
    if op.name == "max":
        idx = np.argmax(Z, axis=-1)
    else:
        k = (Z.shape[-1] - 1) // 2
        value = np.partition(Z, k, axis=-1)[..., k]
        idx = np.argmax(Z == value[..., None], axis=-1)
    return np.take_along_axis(Z, idx[..., None], axis=-1)[..., 0], idx


def pool_forward(op, Z) -> np.ndarray:
    return pool_select(op, np.asarray(Z, dtype=np.float64))[0]


def pool_backward(op, Z, upstream, selected=None) -> np.ndarray:
    op = pool(op)
    Z = np.asarray(Z, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != Z.shape[:-1]:
        raise ValueError(f"upstream {upstream.shape} does not match rows of {Z.shape}")
    if not op.selects:
        return np.broadcast_to(upstream[..., None], Z.shape).copy()
    if selected is None:
        raise ValueError(f"{op.name} pool backward needs the indices recorded in forward")
    out = np.zeros(Z.shape)
    np.put_along_axis(out, np.asarray(selected)[..., None], upstream[..., None], axis=-1)
    return out


# -- activations --------------------------------------------------------------

@dataclass(frozen=True)
class ActivationOp:
    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    # (x, f(x)) -> f'(x)
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def eval(self, x):
        return self.fn(np.asarray(x, dtype=np.float64))

    def deriv(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.grad(x, self.fn(x))


ACTIVATION: dict[str, ActivationOp] = {
    "tanh": ActivationOp("tanh", np.tanh, lambda x, y: 1.0 - y * y),
    # hard clamp to [-1, 1]; slope 1 on the closed interval
    "lincut": ActivationOp(
        "lincut",
        lambda x: np.clip(x, -1.0, 1.0),
        lambda x, y: (np.abs(x) <= 1.0).astype(np.float64),
    ),
    "identity": ActivationOp("identity", lambda x: x.copy(), lambda x, y: np.ones_like(x)),
}


def activation_forward(op, x) -> np.ndarray:
    return activation(op).eval(x)


def activation_backward(op, x, upstream) -> np.ndarray:
    return np.asarray(upstream, dtype=np.float64) * activation(op).deriv(x)


# -- registry lookups and operator sets ---------------------------------------

def _lookup(table, kind, key):
    if not isinstance(key, str):
        return key
    try:
        return table[key]
    except KeyError:
        raise KeyError(f"unknown {kind} operator {key!r}; known: {sorted(table)}") from None


def nodal(key) -> NodalOp:
    return _lookup(NODAL, "nodal", key)


def pool(key) -> PoolOp:
    return _lookup(POOL, "pool", key)


def activation(key) -> ActivationOp:
    return _lookup(ACTIVATION, "activation", key)


@dataclass(frozen=True, order=True)
class OperatorSet:
    """A neuron's (nodal, pool, activation) triple, by registered id."""

    nodal: str
    pool: str
    activation: str

    def __post_init__(self):
        nodal(self.nodal)
        pool(self.pool)
        activation(self.activation)

    def __str__(self):
        return f"{self.nodal}-{self.pool}-{self.activation}"

    @classmethod
    def parse(cls, text: str) -> "OperatorSet":
        parts = text.strip().split("-")
        if len(parts) != 3:
            raise ValueError(f"operator set must look like 'nodal-pool-activation', got {text!r}")
        return cls(*parts)


CONV = OperatorSet("mul", "sum", "identity")


def default_library() -> list[OperatorSet]:
    """Every registered (nodal, pool, activation) combination, sorted."""
    return sorted(OperatorSet(*t) for t in itertools.product(NODAL, POOL, ACTIVATION))


def parse_library(text: str) -> list[OperatorSet]:
    """Comma-separated operator sets; ``*`` in a slot expands to every id."""
    out = set()
    for item in (s.strip() for s in text.split(",")):
        if not item:
            continue
        parts = item.split("-")
        if len(parts) != 3:
            raise ValueError(f"bad operator set {item!r}")
        tables = (NODAL, POOL, ACTIVATION)
        choices = [list(t) if p == "*" else [p] for p, t in zip(parts, tables)]
        out.update(OperatorSet(*c) for c in itertools.product(*choices))
    if not out:
        raise ValueError("operator library is empty")
    return sorted(out)
