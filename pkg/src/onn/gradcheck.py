"""Finite-difference verification of network gradients.

A random two-layer network whose neurons all use one operator set is
differentiated analytically and by sixth-order central differences of a
random linear functional of its output. Coordinates whose perturbation changes a pool
selection, crosses a LinCut corner or moves a signed-log input across zero
are skipped: the loss is not smooth enough there for the stencil.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .network import NetworkSpec, build_spec, init_state, network_backward, network_forward
from .operators import OperatorSet

STEP = 1e-3
FLOOR = 1e-6
TOLERANCE = 1e-5
# sixth-order central difference: truncation error stays far below the
# tolerance at a step large enough to keep rounding error small too
_OFFSETS = (-3, -2, -1, 1, 2, 3)
_WEIGHTS = np.array([-1.0, 9.0, -45.0, 45.0, -9.0, 1.0]) / 60.0


@dataclass
class CheckResult:
    operator_set: OperatorSet
    max_error: float  # worst relative error over all arrays and configs
    worst: str  # which config/array gave it
    checked: int  # coordinates compared
    skipped: int  # coordinates at non-differentiable points
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def __str__(self):
        status = "ok  " if self.passed else "FAIL"
        return (f"{status} {self.operator_set!s:<26} max rel err {self.max_error:.2e} "
                f"({self.checked} checked, {self.skipped} skipped) {self.worst}")


def random_config(theta: OperatorSet, rng: np.random.Generator, kernels=((3, 3),)):
    """Small two-layer network of ``theta`` neurons, an input and a functional."""
    kernel = kernels[rng.integers(len(kernels))]
    shape = tuple(int(s) for s in rng.integers(3, 7, size=2))
    inputs = int(rng.integers(1, 3))
    hidden = int(rng.integers(1, 4))
    outputs = int(rng.integers(1, 3))
    spec = build_spec([[theta] * hidden], shape, kernel, inputs)
    spec = NetworkSpec(
        spec.layers[:-1] + (type(spec.layers[-1])((spec.layers[0].neurons[0],) * outputs, hidden),),
        shape,
    )
    state = init_state(spec, rng)
    x = rng.normal(0.0, 1.0, (inputs, *shape))
    for i, layer in enumerate(state.layers):
        for w in layer.weights:
            w *= rng.uniform(1.0, 3.0)  # away from the linear regime
        # centre pre-activations so tanh is not saturated; a flat tanh makes
        # the true gradient too small for finite differences to resolve
        _, trace = network_forward(x, spec, state)
        layer.bias[:] += rng.normal(0.0, 0.3, layer.bias.shape) - trace.layers[i].pre[0].mean(axis=-1)
    coeff = rng.normal(0.0, 1.0, (outputs, *shape))
    return spec, state, x, coeff


def _regime(trace) -> list:
    """Everything that decides which smooth piece the loss is on."""
    out = []
    for lt in trace.layers:
        out.extend(sel for _, sel in sorted(lt.selected.items(), key=lambda kv: str(kv[0])))
        if any(n.operator_set.nodal == "log" for n in lt.spec.neurons):
            # signed log has a curvature jump at 0
            out.append(np.sign(lt.x))
        for b, neuron in enumerate(lt.spec.neurons):
            if neuron.operator_set.activation == "lincut":
                out.append(np.abs(lt.pre[:, b]) <= 1.0)
    return out


def _same(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def check_network(spec, state, x, coeff, step=STEP, floor=FLOOR, engine: Optional[str] = None):
    """Relative errors per array; returns (errors, checked, skipped).

    ``errors`` maps 'param k' / 'input' to ||a - n|| / max(||a||, ||n||, floor)
    over the differentiable coordinates of that array.
    """
    def loss(st, inp):
        y, tr = network_forward(inp, spec, st, engine)
        return float(np.sum(coeff * y)), tr

    _, trace = loss(state, x)
    base = _regime(trace)
    grads, gx = network_backward(trace, state, coeff, need_input_grad=True)
    targets = [(f"param {k}", p, g) for k, (p, g) in enumerate(zip(state.parameters(), grads))]
    work = x.copy()
    targets.append(("input", work, gx))
    errors, checked, skipped = {}, 0, 0
    for name, arr, g in targets:
        a, n = [], []
        flat, gflat = arr.reshape(-1), np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals, smooth = [], True
            for k in _OFFSETS:
                flat[i] = orig + k * step
                state.touch()
                lk, tk = loss(state, work)
                vals.append(lk)
                smooth = smooth and _same(_regime(tk), base)
            flat[i] = orig
            state.touch()
            if not smooth:
                skipped += 1
                continue
            a.append(gflat[i])
            n.append(float(np.dot(_WEIGHTS, vals)) / step)
        checked += len(a)
        if a:
            a, n = np.array(a), np.array(n)
            errors[name] = float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))
    return errors, checked, skipped


def gradcheck_set(theta: OperatorSet, configs: int = 20, seed: int = 0, tolerance: float = TOLERANCE,
                  engine: Optional[str] = None) -> CheckResult:
    """Check ``configs`` random networks built from ``theta``."""
    worst, where, checked, skipped = 0.0, "", 0, 0
    for c in range(configs):
        rng = np.random.default_rng([seed, c, *(ord(ch) for ch in str(theta))])
        errors, n_ok, n_skip = check_network(*random_config(theta, rng), engine=engine)
        checked += n_ok
        skipped += n_skip
        for name, err in errors.items():
            if err > worst:
                worst, where = err, f"config {c} {name}"
    return CheckResult(theta, worst, where, checked, skipped, tolerance)


def gradcheck_library(library: Sequence[OperatorSet], configs: int = 20, seed: int = 0,
                      tolerance: float = TOLERANCE, engine: Optional[str] = None) -> list:
    if not library:
        raise ValueError("operator library is empty")
    return [gradcheck_set(theta, configs, seed, tolerance, engine) for theta in library]
