"""Operational layers and networks: forward, backward, loss, checkpoints.

A neuron b in layer l computes

    pre_b = bias_b + sum_a pool_b(nodal_b(patches(y_a), w_ab))
    y_b   = activation_b(pre_b)

over the zero-padded windows of every input map y_a. With (mul, sum) this is
an ordinary multi-channel convolution (cross-correlation) layer.

All computation is batched: maps are arrays of shape (B, A, M, N).
"""

from __future__ import annotations

import base64
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import operators as ops
from .operators import OperatorSet
from .tensor import check_kernel, patches, patches_adjoint

FORMAT_VERSION = 1


@dataclass(frozen=True)
class NeuronSpec:
    operator_set: OperatorSet
    kernel: tuple[int, int] = (3, 3)

    def __post_init__(self):
        object.__setattr__(self, "kernel", check_kernel(self.kernel))


@dataclass(frozen=True)
class LayerSpec:
    neurons: tuple[NeuronSpec, ...]
    input_count: int

    def __post_init__(self):
        object.__setattr__(self, "neurons", tuple(self.neurons))
        if not self.neurons:
            raise ValueError("a layer needs at least one neuron")
        if self.input_count < 1:
            raise ValueError("input_count must be >= 1")

    @property
    def size(self) -> int:
        return len(self.neurons)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.input_count != prev.size:
                raise ValueError(
                    f"layer fan-in {nxt.input_count} does not match previous width {prev.size}"
                )

    @property
    def input_count(self) -> int:
        return self.layers[0].input_count

    def assignment(self) -> list[list[OperatorSet]]:
        return [[n.operator_set for n in layer.neurons] for layer in self.layers]


def build_spec(
    hidden: Sequence[Sequence[OperatorSet]],
    input_shape=(60, 60),
    kernel=(3, 3),
    inputs: int = 1,
    output: OperatorSet = ops.CONV,
) -> NetworkSpec:
    """Hidden layers from per-neuron operator sets, plus one linear output neuron."""
    layers = []
    fan_in = inputs
    for sets in hidden:
        layers.append(LayerSpec(tuple(NeuronSpec(s, kernel) for s in sets), fan_in))
        fan_in = len(sets)
    layers.append(LayerSpec((NeuronSpec(output, kernel),), fan_in))
    return NetworkSpec(tuple(layers), input_shape)


def cnn_spec(hidden=(12, 12), activation="tanh", input_shape=(60, 60), kernel=(3, 3)) -> NetworkSpec:
    """The equivalent CNN: (mul, sum) everywhere, linear output."""
    conv = OperatorSet("mul", "sum", activation)
    return build_spec([[conv] * n for n in hidden], input_shape, kernel)


def parameter_count(spec: NetworkSpec) -> int:
    total = 0
    for layer in spec.layers:
        for neuron in layer.neurons:
            m, n = neuron.kernel
            total += layer.input_count * m * n + 1
    return total


@dataclass
class LayerState:
    weights: list[np.ndarray]  # per neuron: (input_count, m, n)
    bias: np.ndarray  # (neurons,)


@dataclass
class NetworkState:
    layers: list[LayerState]
    version: int = 0

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.weights)
            out.append(layer.bias)
        return out

    def touch(self):
        """Mark parameters as changed; traces from earlier forwards go stale."""
        self.version += 1

    def copy(self) -> "NetworkState":
        return NetworkState(
            [LayerState([w.copy() for w in l.weights], l.bias.copy()) for l in self.layers],
            self.version,
        )


def init_state(spec: NetworkSpec, rng: np.random.Generator) -> NetworkState:
    """Uniform weights in [-s, s] with s = sqrt(1 / (fan_in * m * n)); zero biases."""
    layers = []
    for layer in spec.layers:
        weights = []
        for neuron in layer.neurons:
            m, n = neuron.kernel
            s = np.sqrt(1.0 / (layer.input_count * m * n))
            weights.append(rng.uniform(-s, s, size=(layer.input_count, m, n)))
        layers.append(LayerState(weights, np.zeros(layer.size)))
    return NetworkState(layers)


def _check_state(spec: NetworkSpec, state: NetworkState):
    if len(state.layers) != len(spec.layers):
        raise ValueError("state and spec disagree on layer count")
    for layer, ls in zip(spec.layers, state.layers):
        if len(ls.weights) != layer.size or ls.bias.shape != (layer.size,):
            raise ValueError("state and spec disagree on layer width")
        for neuron, w in zip(layer.neurons, ls.weights):
            if w.shape != (layer.input_count, *neuron.kernel):
                raise ValueError(f"weight shape {w.shape} does not match {neuron}")


# -- layer forward / backward --------------------------------------------------

try:
    from . import _kernels
except ImportError:  # pragma: no cover - numba missing
    _kernels = None

ENGINE = os.environ.get("ONN_ENGINE", "numba" if _kernels is not None else "numpy")


@dataclass
class LayerTrace:
    spec: LayerSpec
    x: np.ndarray  # (B, A, M, N) layer input
    batched: bool
    version: int
    engine: str
    pre: Optional[np.ndarray] = None  # (B, neurons, P)
    out: Optional[np.ndarray] = None
    selected: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict)
    consumed: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape[2], self.x.shape[3]

    def patches(self, kernel) -> np.ndarray:
        key = ("patches", kernel)
        if key not in self.cache:
            self.cache[key] = patches(self.x, kernel)
        return self.cache[key]

    def padded(self, kernel) -> np.ndarray:
        key = ("padded", kernel)
        if key not in self.cache:
            m, n = kernel
            B, A, M, N = self.x.shape
            xp = np.zeros((B, A, M + m - 1, N + n - 1))
            xp[:, :, m // 2:m // 2 + M, n // 2:n // 2 + N] = self.x
            self.cache[key] = xp
        return self.cache[key]

    def padded_feature(self, kernel, op: ops.NodalOp) -> np.ndarray:
        # separable features vanish at 0, so padding commutes with them
        key = ("padded_feature", kernel, op.name)
        if key not in self.cache:
            self.cache[key] = op.feature(self.padded(kernel))
        return self.cache[key]

    def feature(self, kernel, op: ops.NodalOp) -> np.ndarray:
        key = ("feature", kernel, op.name)
        if key not in self.cache:
            self.cache[key] = op.feature(self.patches(kernel))
        return self.cache[key]


def _groups(layer: LayerSpec):
    groups = defaultdict(list)
    for b, neuron in enumerate(layer.neurons):
        s = neuron.operator_set
        groups[(neuron.kernel, s.nodal, s.pool)].append(b)
    return sorted(groups.items())


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ValueError(f"expected maps of shape (A, M, N) or (B, A, M, N), got {x.shape}")


def _uses_gemm(op: ops.NodalOp, pool_id: str) -> bool:
    return op.separable and pool_id == "sum"


def layer_forward(inputs, layer: LayerSpec, state: LayerState, version: int = 0, engine: Optional[str] = None):
    """Apply one operational layer. Returns ``(outputs, trace)``."""
    x, batched = _as_batch(inputs)
    B, A, M, N = x.shape
    if A != layer.input_count:
        raise ValueError(f"layer expects {layer.input_count} input maps, got {A}")
    engine = engine or ENGINE
    if engine not in ("numba", "numpy") or (engine == "numba" and _kernels is None):
        raise ValueError(f"engine {engine!r} unavailable")
    P = M * N
    trace = LayerTrace(layer, x, batched, version, engine)
    pre = np.zeros((B, layer.size, P))
    for group, idxs in _groups(layer):
        kernel, nodal_id, pool_id = group
        op = ops.nodal(nodal_id)
        K = kernel[0] * kernel[1]
        W = np.stack([state.weights[b] for b in idxs])  # (O, A, m, n)
        if _uses_gemm(op, pool_id):
            G = trace.feature(kernel, op).reshape(B * P, A * K)
            pre[:, idxs, :] = (G @ W.reshape(len(idxs), A * K).T).reshape(B, P, len(idxs)).transpose(0, 2, 1)
        elif engine == "numba":
            acc = np.zeros((B, len(idxs), M, N))
            sel = np.zeros((B, len(idxs), A, M, N) if ops.pool(pool_id).selects else (1, 1, 1, 1, 1), np.int16)
            if op.separable:
                xp, code = trace.padded_feature(kernel, op), _kernels.NODAL_CODES["mul"]
            else:
                xp, code = trace.padded(kernel), _kernels.NODAL_CODES[nodal_id]
            _kernels.group_forward(xp, W, code, _kernels.POOL_CODES[pool_id], acc, sel)
            pre[:, idxs, :] = acc.reshape(B, len(idxs), P)
            trace.selected[group] = sel
        else:
            Y = trace.patches(kernel)
            for j, b in enumerate(idxs):
                Wj = W[j].reshape(A, K)
                Z = trace.feature(kernel, op) * Wj if op.separable else op.fn(Y, Wj)
                pooled, sel = ops.pool_select(pool_id, Z)
                pre[:, b, :] = pooled.sum(axis=-1)
                if sel is not None:
                    trace.selected[b] = sel.astype(np.int16)
    pre += state.bias[None, :, None]
    out = np.empty_like(pre)
    for b, neuron in enumerate(layer.neurons):
        out[:, b] = ops.activation(neuron.operator_set.activation).fn(pre[:, b])
    trace.pre, trace.out = pre, out
    y = out.reshape(B, layer.size, M, N)
    return (y if batched else y[0]), trace


def layer_backward(trace: Optional[LayerTrace], state: LayerState, upstream, version: int = 0,
                   need_input_grad: bool = True):
    """Backpropagate through one layer.

    Returns ``(input_grads, weight_grads, bias_grads)``; ``input_grads`` is
    ``None`` when ``need_input_grad`` is false.
    """
    if trace is None:
        raise ValueError("layer_backward needs the trace of a forward pass")
    if trace.consumed or trace.version != version:
        raise ValueError("stale trace: parameters changed or trace already used")
    layer = trace.spec
    g = np.asarray(upstream, dtype=np.float64)
    if not trace.batched:
        g = g[None]
    B, A, (M, N) = trace.x.shape[0], layer.input_count, trace.shape
    P = M * N
    if g.shape != (B, layer.size, M, N):
        raise ValueError(f"upstream gradient {g.shape} does not match layer output")
    trace.consumed = True
    g = g.reshape(B, layer.size, P)
    delta = np.empty((B, layer.size, P))
    for b, neuron in enumerate(layer.neurons):
        act = ops.activation(neuron.operator_set.activation)
        delta[:, b] = g[:, b] * act.grad(trace.pre[:, b], trace.out[:, b])
    bias_grad = delta.sum(axis=(0, 2))
    weight_grads: list = [None] * layer.size
    dY: dict = {}  # kernel -> patch-space gradient (B, P, A, K)
    dpad: dict = {}  # kernel -> padded-map gradient

    for group, idxs in _groups(layer):
        kernel, nodal_id, pool_id = group
        op = ops.nodal(nodal_id)
        K = kernel[0] * kernel[1]
        shape = state.weights[idxs[0]].shape
        W = np.stack([state.weights[b] for b in idxs])
        if _uses_gemm(op, pool_id):
            G = trace.feature(kernel, op).reshape(B * P, A * K)
            D = delta[:, idxs, :].transpose(0, 2, 1).reshape(B * P, len(idxs))
            dW = (D.T @ G).reshape(len(idxs), *shape)
            for j, b in enumerate(idxs):
                weight_grads[b] = dW[j]
            if need_input_grad:
                dG = (D @ W.reshape(len(idxs), A * K)).reshape(B, P, A, K)
                if op.name != "mul":
                    dG *= op.feature_grad(trace.patches(kernel))
                if kernel in dY:
                    dY[kernel] += dG
                else:
                    dY[kernel] = dG
        elif trace.engine == "numba":
            raw = trace.padded(kernel)
            if op.separable:
                xp, code = trace.padded_feature(kernel, op), _kernels.NODAL_CODES["mul"]
            else:
                xp, code = raw, _kernels.NODAL_CODES[nodal_id]
            dx = np.zeros_like(xp) if need_input_grad else xp[:1, :1, :1, :1]
            dW = np.zeros_like(W)
            _kernels.group_backward(
                xp, W, code, _kernels.POOL_CODES[pool_id],
                np.ascontiguousarray(delta[:, idxs, :]).reshape(B, len(idxs), M, N),
                trace.selected[group], dW, dx, need_input_grad,
            )
            if need_input_grad:
                if op.separable and op.name != "mul":
                    dx *= op.feature_grad(raw)
                if kernel in dpad:
                    dpad[kernel] += dx
                else:
                    dpad[kernel] = dx
            for j, b in enumerate(idxs):
                weight_grads[b] = dW[j]
        else:
            Y = trace.patches(kernel)
            if need_input_grad and kernel not in dY:
                dY[kernel] = np.zeros_like(Y)
            for j, b in enumerate(idxs):
                d = delta[:, b, :]
                Wj = W[j].reshape(A, K)
                if pool_id == "sum":
                    dy, dw = op.partials(Y, Wj)
                    dw = np.broadcast_to(dw, Y.shape).reshape(B * P, A * K)
                    weight_grads[b] = (d.reshape(-1) @ dw).reshape(shape)
                    if need_input_grad:
                        dY[kernel] += d[:, :, None, None] * dy
                    continue
                sel = trace.selected[b].astype(np.intp)
                ysel = np.take_along_axis(Y, sel[..., None], axis=-1)[..., 0]
                wsel = Wj[np.arange(A)[None, None, :], sel]
                dy, dw = op.partials(ysel, wsel)
                dw = d[:, :, None] * dw
                flat = (np.arange(A)[None, None, :] * K + sel).reshape(-1)
                weight_grads[b] = np.bincount(flat, weights=dw.reshape(-1), minlength=A * K).reshape(shape)
                if need_input_grad:
                    onehot = sel[..., None] == np.arange(K)
                    dY[kernel] += onehot * (d[:, :, None] * dy)[..., None]

    input_grads = None
    if need_input_grad:
        input_grads = np.zeros((B, A, M, N))
        for kernel, dYk in dY.items():
            input_grads += patches_adjoint(dYk, kernel, (M, N))
        for (m, n), dp in dpad.items():
            input_grads += dp[:, :, m // 2:m // 2 + M, n // 2:n // 2 + N]
        if not trace.batched:
            input_grads = input_grads[0]
    return input_grads, weight_grads, bias_grad


# -- whole network -------------------------------------------------------------

@dataclass
class ForwardTrace:
    layers: list[LayerTrace]
    version: int


def network_forward(x, spec: NetworkSpec, state: NetworkState, engine: Optional[str] = None):
    """Run every layer. Input (A, M, N) or (B, A, M, N); a bare (M, N) image is
    accepted for single-input networks. Output has one map per last-layer neuron."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    _check_state(spec, state)
    traces = []
    for layer, ls in zip(spec.layers, state.layers):
        x, t = layer_forward(x, layer, ls, state.version, engine)
        traces.append(t)
    return x, ForwardTrace(traces, state.version)


def network_backward(trace: ForwardTrace, state: NetworkState, upstream, need_input_grad=False):
    """Gradients for every parameter, in ``state.parameters()`` order.

    Returns ``(param_grads, input_grad)``.
    """
    grads_per_layer = []
    g = upstream
    n = len(trace.layers)
    for i in range(n - 1, -1, -1):
        need = need_input_grad or i > 0
        g, wg, bg = layer_backward(trace.layers[i], state.layers[i], g, state.version, need)
        grads_per_layer.append((wg, bg))
    grads = []
    for wg, bg in reversed(grads_per_layer):
        grads.extend(wg)
        grads.append(bg)
    return grads, g


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


# -- checkpoints ---------------------------------------------------------------

def _encode(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    a = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").astype(np.float64)
    return a.reshape(d["shape"])


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "input_shape": list(spec.input_shape),
        "layers": [
            {
                "input_count": layer.input_count,
                "neurons": [{"operator_set": str(n.operator_set), "kernel": list(n.kernel)} for n in layer.neurons],
            }
            for layer in spec.layers
        ],
    }


def spec_from_dict(d: dict) -> NetworkSpec:
    layers = [
        LayerSpec(
            tuple(NeuronSpec(OperatorSet.parse(n["operator_set"]), tuple(n["kernel"])) for n in layer["neurons"]),
            int(layer["input_count"]),
        )
        for layer in d["layers"]
    ]
    return NetworkSpec(tuple(layers), tuple(d["input_shape"]))


def save_checkpoint(path, spec: NetworkSpec, state: NetworkState, extra: Optional[dict] = None):
    doc = {
        "format_version": FORMAT_VERSION,
        "spec": spec_to_dict(spec),
        "weights": [[_encode(w) for w in l.weights] for l in state.layers],
        "biases": [_encode(l.bias) for l in state.layers],
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[NetworkSpec, NetworkState]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    spec = spec_from_dict(doc["spec"])
    state = NetworkState(
        [LayerState([_decode(w) for w in ws], _decode(b)) for ws, b in zip(doc["weights"], doc["biases"])]
    )
    _check_state(spec, state)
    return spec, state
