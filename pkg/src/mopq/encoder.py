"""Small dense encoder producing the embeddings that get quantized.

Depth 1 is a linear map ``x W + b``; depth 2 inserts one tanh hidden layer:
``tanh(x W1 + b1) W2 + b2``. The value-level ``encode_values`` builds the same
graph on constants and reads the result, so graph and value paths agree
bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Array, Node, ParameterSet
from .errors import UsageError


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    hidden_dim: int
    output_dim: int
    depth: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        if self.depth not in (1, 2):
            raise UsageError("encoder depth must be 1 (linear) or 2 (one hidden layer)")
        if self.activation != "tanh":
            raise UsageError("tanh is the only supported activation")
        if min(self.input_dim, self.output_dim) < 1:
            raise UsageError("encoder dims must be positive")
        if self.depth == 2 and self.hidden_dim < 1:
            raise UsageError("depth-2 encoder needs a positive hidden_dim")


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> ParameterSet:
    """Gaussian fan-in initialization; biases start at zero."""
    params: ParameterSet = {}
    if cfg.depth == 1:
        params["enc_w"] = rng.normal(size=(cfg.input_dim, cfg.output_dim)) / np.sqrt(cfg.input_dim)
        params["enc_b"] = np.zeros(cfg.output_dim)
    else:
        params["enc_w1"] = rng.normal(size=(cfg.input_dim, cfg.hidden_dim)) / np.sqrt(cfg.input_dim)
        params["enc_b1"] = np.zeros(cfg.hidden_dim)
        params["enc_w2"] = rng.normal(size=(cfg.hidden_dim, cfg.output_dim)) / np.sqrt(cfg.hidden_dim)
        params["enc_b2"] = np.zeros(cfg.output_dim)
    return params


def encode_graph(x: Array, param_nodes: dict[str, Node], cfg: EncoderConfig) -> Node:
    """Encode a batch (n, input_dim) or a single vector (input_dim,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.input_dim:
        raise UsageError(f"input width {x.shape[-1]} != encoder input_dim {cfg.input_dim}")
    data = ag.constant(x)
    if cfg.depth == 1:
        return ag.add(ag.matmul(data, param_nodes["enc_w"]), param_nodes["enc_b"])
    hidden = ag.tanh(ag.add(ag.matmul(data, param_nodes["enc_w1"]), param_nodes["enc_b1"]))
    return ag.add(ag.matmul(hidden, param_nodes["enc_w2"]), param_nodes["enc_b2"])


def parameter_nodes(params: ParameterSet) -> dict[str, Node]:
    return {name: ag.parameter(name, value) for name, value in params.items()}


def encode_values(x: Array, params: ParameterSet, cfg: EncoderConfig) -> Array:
    """Plain-array encoding; bit-identical to the graph forward pass."""
    return encode_graph(x, parameter_nodes(params), cfg).value
