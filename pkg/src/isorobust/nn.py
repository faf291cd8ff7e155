"""Affine + activation layer stacks with hand-written backpropagation.

Generators and network classifiers are both built from :class:`Affine`
layers.  Inputs are row vectors; a batch is a 2-D array of shape (B, in).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")


def activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return a
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * a))
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """Derivative of the activation w.r.t. its input, evaluated elementwise."""
    if name == "identity":
        return np.ones_like(pre)
    if name == "relu":
        # subgradient 0 at exactly 0
        return (pre > 0).astype(float)
    if name == "tanh":
        return 1.0 - post * post
    if name == "sigmoid":
        return post * (1.0 - post)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True, eq=False)
class Affine:
    """``activation(x @ weight.T + bias)`` with ``weight`` of shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        w = np.array(self.weight, dtype=float, copy=True)
        b = np.array(self.bias, dtype=float, copy=True).reshape(-1)
        if w.ndim != 2:
            raise ValueError("layer weight must be a 2-D matrix")
        if b.shape[0] != w.shape[0]:
            raise ValueError(f"bias length {b.shape[0]} does not match weight rows {w.shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer weights must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def same_as(self, other: "Affine") -> bool:
        return (
            self.activation == other.activation
            and self.weight.shape == other.weight.shape
            and np.array_equal(self.weight, other.weight)
            and np.array_equal(self.bias, other.bias)
        )


def check_chain(layers: Sequence[Affine]) -> None:
    if not layers:
        raise ValueError("a layer stack needs at least one layer")
    for i in range(1, len(layers)):
        if layers[i].in_dim != layers[i - 1].out_dim:
            raise ValueError(
                f"layer {i} expects input dim {layers[i].in_dim}, previous layer outputs {layers[i - 1].out_dim}"
            )


def forward(layers: Sequence[Affine], x: np.ndarray) -> np.ndarray:
    h = x
    for layer in layers:
        h = activate(layer.activation, h @ layer.weight.T + layer.bias)
    return h


def forward_cached(layers: Sequence[Affine], x: np.ndarray):
    """Forward pass keeping (input, pre-activation, output) per layer for :func:`backward`."""
    cache = []
    h = x
    for layer in layers:
        pre = h @ layer.weight.T + layer.bias
        post = activate(layer.activation, pre)
        cache.append((h, pre, post))
        h = post
    return h, cache


def backward(layers: Sequence[Affine], cache, grad_out: np.ndarray, param_grads: bool = False):
    """Pull ``grad_out`` (B, out) back through the stack.

    Returns the input gradient, and when ``param_grads`` is set also a list of
    ``(dW, db)`` summed over the batch.
    """
    g = grad_out
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        h_in, pre, post = cache[i]
        g = g * activation_grad(layer.activation, pre, post)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at layer {i}")
        if param_grads:
            grads.append((g.T @ h_in, g.sum(axis=0)))
        g = g @ layer.weight
    if param_grads:
        grads.reverse()
        return g, grads
    return g


def random_stack(sizes: Sequence[int], activation: str, gen: np.random.Generator,
                 final_activation: str = "identity", scale: float = 1.0) -> list[Affine]:
    """Gaussian-initialised stack with 1/sqrt(fan_in) weight scale."""
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        w = gen.standard_normal((fan_out, fan_in)) * (scale / np.sqrt(fan_in))
        b = gen.standard_normal(fan_out) * 0.1 * scale
        act = activation if i < len(sizes) - 2 else final_activation
        layers.append(Affine(w, b, act))
    return layers
