"""Operational neural networks: generalized convolution with pluggable
nodal, pool and activation operators, an operator search driven by weight
plasticity, and image-denoising experiments."""

from .network import (
    NetworkSpec,
    NetworkState,
    build_spec,
    cnn_spec,
    init_state,
    load_checkpoint,
    network_backward,
    network_forward,
    parameter_count,
    save_checkpoint,
)
from .operators import CONV, OperatorSet, default_library

__all__ = [
    "CONV",
    "NetworkSpec",
    "NetworkState",
    "OperatorSet",
    "build_spec",
    "cnn_spec",
    "default_library",
    "init_state",
    "load_checkpoint",
    "network_backward",
    "network_forward",
    "parameter_count",
    "save_checkpoint",
]
