"""Multilayer perceptron primitives on top of the generic AD carriers.

Weights are stored as (n_in, n_out) matrices so a batched forward pass is
``h @ W + b``.  ``mlp_forward`` accepts ndarrays, Vars, or Duals for both
the input and the parameters, which is what lets one network definition
serve plain inference, training, and nested-derivative evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import InvalidArchitectureError, ShapeError
from . import core

ACTIVATIONS = {
    "tanh": core.tanh,
    "softplus": core.softplus,
    "relu": core.relu,
}


@dataclass(frozen=True)
class MlpParams:
    """Sizes, per-layer weight matrices and bias vectors, activation name."""

    layer_sizes: tuple
    weights: tuple
    biases: tuple
    activation: str = "tanh"

    @property
    def n_params(self):
        sizes = self.layer_sizes
        return sum((sizes[k] + 1) * sizes[k + 1] for k in range(len(sizes) - 1))


def _check_sizes(layer_sizes, activation):
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise InvalidArchitectureError(
            f"need at least input and output sizes, got {list(sizes)}"
        )
    if any(s < 1 for s in sizes):
        raise InvalidArchitectureError(f"zero-size layer in {list(sizes)}")
    if activation not in ACTIVATIONS:
        raise InvalidArchitectureError(
            f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}"
        )
    return sizes


def mlp_init(layer_sizes, activation="tanh", seed=0):
    """Deterministic init: W ~ U(-a, a) with a = sqrt(6/(fan_in+fan_out)),
    biases zero."""
    sizes = _check_sizes(layer_sizes, activation)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-a, a, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpParams(sizes, tuple(weights), tuple(biases), activation)


def mlp_forward(params, x):
    """Forward pass; hidden layers use the configured activation, the
    output layer is linear.  Input dim must match the first layer size."""
    in_dim = core.shape_of(x)[-1]
    if in_dim != params.layer_sizes[0]:
        raise ShapeError(
            f"input dim {in_dim} != first layer size {params.layer_sizes[0]}"
        )
    act = ACTIVATIONS[params.activation]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = core.matmul(h, w) + b
        if k < last:
            h = act(h)
    return h


def mlp_flatten(params):
    """Concatenate all parameters: per layer, W (row-major) then b."""
    chunks = []
    for w, b in zip(params.weights, params.biases):
        chunks.append(np.asarray(w, dtype=float).ravel())
        chunks.append(np.asarray(b, dtype=float).ravel())
    return np.concatenate(chunks) if chunks else np.zeros(0)


def mlp_unflatten(layer_sizes, activation, flat):
    """Inverse of mlp_flatten."""
    sizes = _check_sizes(layer_sizes, activation)
    flat = np.asarray(flat, dtype=float)
    weights, biases = [], []
    pos = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(flat[pos:pos + n_in * n_out].reshape(n_in, n_out))
        pos += n_in * n_out
        biases.append(flat[pos:pos + n_out].copy())
        pos += n_out
    if pos != flat.size:
        raise ShapeError(f"flat vector has {flat.size} entries, expected {pos}")
    return MlpParams(sizes, tuple(weights), tuple(biases), activation)


def mlp_lift(params, tape):
    """Replace every parameter array with a Var on `tape`; returns the
    lifted MlpParams and the flat list of leaf Vars (layer order, W then b)."""
    leaves = []
    weights, biases = [], []
    for w, b in zip(params.weights, params.biases):
        wv = tape.var(w, name="W")
        bv = tape.var(b, name="b")
        leaves.extend([wv, bv])
        weights.append(wv)
        biases.append(bv)
    lifted = replace(params, weights=tuple(weights), biases=tuple(biases))
    return lifted, leaves
