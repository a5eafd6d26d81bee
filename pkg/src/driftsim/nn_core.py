"""Small dense ReLU network with analytic backprop and plain SGD.

Everything here is float64 and side-effect free: functions return new
arrays and never write into the params or batches they are given.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidConfig, InvalidLabel, ShapeError


@dataclass(frozen=True)
class ModelParams:
    """Ordered (weight[in, out], bias[out]) pairs of a dense network."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        if not self.layers:
            raise InvalidConfig("model needs at least one layer")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[0] != self.layers[i - 1][0].shape[1]:
                raise ShapeError(f"layer {i}: input dim {w.shape[0]} != previous output dim")

    @property
    def layer_dims(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in self.layers for a in pair]

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "ModelParams":
        it = iter(arrays)
        return cls(tuple((w, b) for w, b in zip(it, it)))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays([a.copy() for a in self.arrays()])


# Same container shape; a separate name keeps signatures readable.
Gradients = ModelParams


def init_params(layer_dims: Sequence[int], seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases."""
    dims = list(layer_dims)
    if len(dims) < 2 or any(int(d) != d or d <= 0 for d in dims):
        raise InvalidConfig(f"layer_dims must be >= 2 positive ints, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return ModelParams(tuple(layers))


def _check_inputs(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"inputs must be a non-empty [n, d] matrix, got shape {x.shape}")
    if x.shape[1] != params.layers[0][0].shape[0]:
        raise ShapeError(
            f"input dim {x.shape[1]} does not match layer_dims[0]={params.layers[0][0].shape[0]}"
        )
    return x


def forward(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Logits [n, K]: affine layers, ReLU between them, linear output."""
    h = _check_inputs(params, inputs)
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def predict(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    return np.argmax(forward(params, inputs), axis=1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(
    params: ModelParams, inputs: np.ndarray, labels: np.ndarray
) -> tuple[float, Gradients]:
    """Mean softmax cross-entropy and its exact gradient w.r.t. every parameter."""
    x = _check_inputs(params, inputs)
    labels = np.asarray(labels)
    n_out = params.layers[-1][0].shape[1]
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {x.shape[0]}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= n_out:
        raise InvalidLabel(f"labels must be integers in [0, {n_out})")

    # forward, keeping post-activation values for backprop
    acts = [x]
    last = len(params.layers) - 1
    h = x
    for i, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)

    n = x.shape[0]
    logp = log_softmax(acts[-1])
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())

    delta = np.exp(logp)
    delta[rows, labels] -= 1.0
    delta /= n

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    for i in range(last, -1, -1):
        w, _ = params.layers[i]
        a_in = acts[i]
        grads[i] = (a_in.T @ delta, delta.sum(axis=0))
        if i:
            delta = (delta @ w.T) * (a_in > 0.0)
    return max(loss, 0.0), ModelParams(tuple(grads))


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    if lr < 0:
        raise InvalidConfig(f"learning rate must be non-negative, got {lr}")
    if [w.shape for w, _ in params.layers] != [w.shape for w, _ in grads.layers]:
        raise ShapeError("gradient shapes do not match parameter shapes")
    return ModelParams(
        tuple((w - lr * gw, b - lr * gb) for (w, b), (gw, gb) in zip(params.layers, grads.layers))
    )
