"""Operator search by synaptic plasticity monitoring.

Probe networks with randomly (later: ledger-guided) assigned operator sets
are trained briefly. A hidden neuron's health is the relative change in the
variance of its outgoing kernels over the last ``gamma`` iterations; per
layer, each operator set collects the mean health of its neurons in every
run, and the sums rank the sets.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .network import NetworkSpec, NetworkState, build_spec, init_state
from .operators import CONV, OperatorSet
from .train import Divergence, TrainConfig, fit

log = logging.getLogger(__name__)

POWER_FLOOR = 1e-12


@dataclass
class SpmConfig:
    gamma: int = 80
    runs: int = 4
    top_k: int = 3
    iterations: int = 160
    confinement: int = 2  # runs drawn uniformly before ledger guidance starts
    window_average: bool = False  # average every full window instead of the last
    max_redraws: int = 20
    train: TrainConfig = field(default_factory=lambda: TrainConfig(batch_size=1, optimizer="vadam"))

    def __post_init__(self):
        if self.gamma < 1 or self.runs < 1 or self.top_k < 1:
            raise ValueError("gamma, runs and top_k must all be >= 1")
        if self.iterations < self.gamma:
            raise ValueError(f"iterations ({self.iterations}) must be >= gamma ({self.gamma})")
        if self.confinement < 0:
            raise ValueError("confinement must be >= 0")


@dataclass
class HealthLedger:
    """Per hidden layer, per operator set: health samples from each run."""

    library: list
    layers: int
    samples: list = None  # [layer] -> {OperatorSet: [rho per run]}
    runs_done: int = 0
    degenerate: int = 0  # neurons whose baseline power was zero
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        self.library = sorted(self.library)
        if self.samples is None:
            self.samples = [{} for _ in range(self.layers)]

    def add_run(self, credits: Sequence[dict]):
        """Merge one run's per-layer {set: mean rho}."""
        if len(credits) != self.layers:
            raise ValueError(f"expected credits for {self.layers} layers, got {len(credits)}")
        for layer, credit in zip(self.samples, credits):
            for theta, rho in credit.items():
                if theta not in self.library:
                    raise ValueError(f"{theta} is not in the operator library")
                if not rho >= 0.0:
                    raise ValueError(f"health must be non-negative, got {rho}")
                layer.setdefault(theta, []).append(float(rho))
        self.runs_done += 1

    def merge(self, other: "HealthLedger"):
        for mine, theirs in zip(self.samples, other.samples):
            for theta, values in theirs.items():
                mine.setdefault(theta, []).extend(values)
        self.runs_done += other.runs_done
        self.degenerate += other.degenerate
        self.diagnostics.extend(other.diagnostics)

    def totals(self, layer: int) -> dict:
        # fsum is exactly rounded, so totals do not depend on run order
        return {theta: math.fsum(v) for theta, v in self.samples[layer].items()}

    def probabilities(self, layer: int) -> dict:
        """Selection probabilities over the whole library; uniform if no mass."""
        totals = self.totals(layer)
        mass = math.fsum(totals.values())
        if not mass > 0.0:
            return {theta: 1.0 / len(self.library) for theta in self.library}
        return {theta: totals.get(theta, 0.0) / mass for theta in self.library}

    def ranking(self, layer: int) -> list:
        """Scored sets as (set, total), best first; ties by operator ids."""
        return sorted(self.totals(layer).items(), key=lambda kv: (-kv[1], kv[0]))


def assign_random(spec: NetworkSpec, library: Sequence[OperatorSet], rng: np.random.Generator) -> list:
    """Uniform independent draws for every hidden neuron."""
    library = sorted(library)
    if not library:
        raise ValueError("operator library is empty")
    return [[library[i] for i in rng.integers(len(library), size=layer.size)] for layer in spec.layers[:-1]]


def assign_guided(spec: NetworkSpec, library: Sequence[OperatorSet], ledger: HealthLedger,
                  rng: np.random.Generator) -> list:
    """Draw hidden-neuron sets in proportion to accumulated health."""
    library = sorted(library)
    out = []
    for l, layer in enumerate(spec.layers[:-1]):
        probs = ledger.probabilities(l)
        p = np.array([probs.get(theta, 0.0) for theta in library])
        p = p / p.sum() if p.sum() > 0 else np.full(len(library), 1.0 / len(library))
        out.append([library[i] for i in rng.choice(len(library), size=layer.size, p=p)])
    return out


def kernel_power(kernels) -> float:
    """Variance over each kernel's elements, averaged across kernels."""
    kernels = [np.asarray(k, dtype=np.float64) for k in kernels]
    if not kernels or any(k.size == 0 for k in kernels):
        raise ValueError("need at least one non-empty kernel")
    return float(np.mean([k.var() for k in kernels]))


def health_factor(before, after) -> float:
    """Relative change in averaged kernel power between two snapshots.

    ``before`` and ``after`` hold the same neuron's outgoing kernels (one per
    post-synaptic neuron). A zero baseline divides by ``POWER_FLOOR``.
    """
    p0, p1 = kernel_power(before), kernel_power(after)
    if len(before) != len(after):
        raise ValueError("snapshots must hold the same number of kernels")
    return abs(p1 - p0) / (abs(p0) if p0 != 0.0 else POWER_FLOOR)


def outgoing(state: NetworkState, layer: int, neuron: int) -> list:
    """Kernels leaving hidden ``neuron`` of ``layer`` (copies)."""
    return [w[neuron].copy() for w in state.layers[layer + 1].weights]


def _snapshot_times(config: SpmConfig) -> list:
    end = config.iterations
    if not config.window_average:
        return [end - config.gamma, end]
    return sorted(range(end, -1, -config.gamma))


def probe_run(assignment, base: NetworkSpec, problem, config: SpmConfig, seed,
              grad_hook_factory: Optional[Callable] = None) -> tuple:
    """Train one probe network; return (per-layer credits, degenerate count)."""
    spec = build_spec(assignment, base.input_shape, base.layers[0].neurons[0].kernel,
                      base.input_count, output=base.layers[-1].neurons[0].operator_set)
    rng = np.random.default_rng(seed)
    state = init_state(spec, rng)
    times = set(_snapshot_times(config))
    snaps = {}

    def record(t, st):
        if t in times:
            snaps[t] = [[outgoing(st, l, a) for a in range(spec.layers[l].size)]
                        for l in range(len(spec.layers) - 1)]

    hook = grad_hook_factory(spec) if grad_hook_factory is not None else None
    noisy, clean = problem
    fit(spec, state, noisy, clean, config.train, rng, max_iterations=config.iterations,
        on_step=record, grad_hook=hook)
    order = sorted(snaps)
    credits, degenerate = [], 0
    for l, neurons in enumerate(assignment):
        per_set = {}
        for a, theta in enumerate(neurons):
            rhos = []
            for t0, t1 in zip(order, order[1:]):
                before, after = snaps[t0][l][a], snaps[t1][l][a]
                degenerate += kernel_power(before) == 0.0
                rhos.append(health_factor(before, after))
            per_set.setdefault(theta, []).append(float(np.mean(rhos)))
        credits.append({theta: float(np.mean(v)) for theta, v in per_set.items()})
    return credits, degenerate


def run_spm(spec: NetworkSpec, library: Sequence[OperatorSet], config: SpmConfig, problem,
            seed: int = 0, grad_hook_factory: Optional[Callable] = None,
            progress: Optional[Callable[[int, HealthLedger], None]] = None) -> HealthLedger:
    """Rank operator sets for every hidden layer of ``spec``'s architecture.

    ``problem`` is a (noisy, clean) pair of [0, 1] image stacks. Only the
    shape of ``spec`` is used; the output layer keeps its own operator set.
    ``grad_hook_factory(probe_spec)`` may return a gradient hook, e.g. to
    freeze some neurons. ``progress(r, ledger)`` runs after each run.
    """
    library = sorted(library)
    if not library:
        raise ValueError("operator library is empty")
    if config.top_k > len(library):
        raise ValueError(f"top_k={config.top_k} exceeds the library size {len(library)}")
    if len(spec.layers) < 2:
        raise ValueError("SPM needs at least one hidden layer")
    ledger = HealthLedger(library, len(spec.layers) - 1)
    for r in range(config.runs):
        for attempt in range(config.max_redraws + 1):
            rng = np.random.default_rng([seed, r, attempt])
            if r < config.confinement:
                assignment = assign_random(spec, library, rng)
            else:
                assignment = assign_guided(spec, library, ledger, rng)
            try:
                credits, degenerate = probe_run(assignment, spec, problem, config,
                                                [seed, r, attempt, 1], grad_hook_factory)
            except Divergence as exc:
                msg = f"run {r} attempt {attempt} diverged ({exc}); redrawing"
                log.warning(msg)
                ledger.diagnostics.append(msg)
                continue
            break
        else:
            raise Divergence(f"run {r} diverged {config.max_redraws + 1} times")
        ledger.add_run(credits)
        ledger.degenerate += degenerate
        if degenerate:
            ledger.diagnostics.append(f"run {r}: {degenerate} neuron(s) with zero baseline power")
        if progress is not None:
            progress(r, ledger)
    return ledger


def allocate(weights: Sequence[float], n: int) -> list:
    """Largest-remainder split of ``n`` items in proportion to ``weights``.

    Ties in remainders go to the earlier entry. When ``n >= len(weights)``
    every entry receives at least one item.
    """
    k = len(weights)
    w = np.asarray(weights, dtype=np.float64)
    if k == 0:
        raise ValueError("nothing to allocate to")
    if w.sum() <= 0:
        w = np.ones(k)
    quota = n * w / w.sum()
    counts = np.floor(quota).astype(int)
    rest = sorted(range(k), key=lambda i: (-(quota[i] - counts[i]), i))
    for i in rest[: n - counts.sum()]:
        counts[i] += 1
    if n >= k:
        for i in range(k):
            if counts[i] == 0:
                # take from the largest share, the earliest on ties
                donor = max(range(k), key=lambda j: (counts[j], -j))
                counts[donor] -= 1
                counts[i] = 1
    return counts.tolist()


def configure_elite(spec: NetworkSpec, ledger: HealthLedger, top_k: int) -> list:
    """Per hidden layer, spread the neurons over the top-K sets by health."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if len(spec.layers) - 1 != ledger.layers:
        raise ValueError(f"spec has {len(spec.layers) - 1} hidden layers, ledger {ledger.layers}")
    out = []
    for l, layer in enumerate(spec.layers[:-1]):
        top = ledger.ranking(l)[:top_k]
        if not top:
            raise ValueError(f"no operator set was scored in layer {l + 1}")
        counts = allocate([rho for _, rho in top], layer.size)
        out.append([theta for (theta, _), c in zip(top, counts) for _ in range(c)])
    return out


def elite_spec(spec: NetworkSpec, ledger: HealthLedger, top_k: int) -> NetworkSpec:
    return build_spec(configure_elite(spec, ledger, top_k), spec.input_shape,
                      spec.layers[0].neurons[0].kernel, spec.input_count,
                      output=spec.layers[-1].neurons[0].operator_set)


def ledger_rows(ledger: HealthLedger) -> list:
    """(layer, rank, nodal, pool, activation, total, probability, runs) rows."""
    rows = []
    for l in range(ledger.layers):
        probs = ledger.probabilities(l)
        for rank, (theta, total) in enumerate(ledger.ranking(l), 1):
            rows.append((l + 1, rank, theta.nodal, theta.pool, theta.activation, total,
                         probs[theta], len(ledger.samples[l][theta])))
    return rows


LEDGER_COLUMNS = ("layer", "rank", "nodal", "pool", "activation", "health", "probability", "samples")


def write_ledger_csv(ledger: HealthLedger, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        for row in ledger_rows(ledger):
            w.writerow([*row[:5], repr(row[5]), repr(row[6]), row[7]])


def ledger_report(ledger: HealthLedger, top: Optional[int] = None) -> str:
    lines = [f"runs: {ledger.runs_done}  degenerate baselines: {ledger.degenerate}"]
    for l in range(ledger.layers):
        lines.append(f"layer {l + 1}")
        lines.append(f"  {'rank':>4}  {'operator set':<28}{'health':>12}{'P':>9}")
        for row in [r for r in ledger_rows(ledger) if r[0] == l + 1][:top]:
            name = f"{row[2]}-{row[3]}-{row[4]}"
            lines.append(f"  {row[1]:>4}  {name:<28}{row[5]:>12.5g}{row[6]:>9.4f}")
    lines.extend(f"note: {d}" for d in ledger.diagnostics)
    return "\n".join(lines) + "\n"


def hidden_spec(hidden=(12, 12), input_shape=(60, 60), kernel=(3, 3)) -> NetworkSpec:
    """Architecture template for searches; operator sets are placeholders."""
    return build_spec([[CONV] * n for n in hidden], input_shape, kernel)
