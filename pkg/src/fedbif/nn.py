"""A small deterministic MLP engine: dense layers, ReLU, softmax cross-entropy, SGD.

Parameters are plain numpy arrays. Weights are stored ``(fan_in, fan_out)`` so a
layer computes ``x @ W + b``. ``forward`` takes the parameters explicitly, which
lets callers substitute reconstructed weights (bit freezing) for the stored ones
and read the gradient w.r.t. whatever was substituted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, SpecificationError


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray

    def copy(self) -> "Layer":
        return Layer(self.weight.copy(), self.bias.copy())


@dataclass
class MlpSpec:
    layer_widths: Sequence[int]
    activation: str = "relu"
    seed: int = 0

    def validate(self) -> None:
        widths = list(self.layer_widths)
        if len(widths) < 2:
            raise SpecificationError(f"need at least 2 layer widths, got {widths}")
        if any(int(w) < 1 for w in widths):
            raise SpecificationError(f"layer widths must be >= 1, got {widths}")
        if self.activation != "relu":
            raise SpecificationError(f"unsupported activation {self.activation!r}")


@dataclass
class GlobalModel:
    """Full-precision server model: one ``Layer`` per dense layer."""

    layers: list[Layer]
    round: int = 0

    def copy(self) -> "GlobalModel":
        return GlobalModel([l.copy() for l in self.layers], self.round)

    @property
    def weight_count(self) -> int:
        return sum(l.weight.size for l in self.layers)

    @property
    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].weight.dtype


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)  # pre-activations
    weights: list[np.ndarray] = field(default_factory=list)


def init_model(spec: MlpSpec, dtype=np.float64) -> GlobalModel:
    """Kaiming-normal weights (variance 2/fan_in), zero biases."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    widths = [int(w) for w in spec.layer_widths]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        layers.append(Layer(w.astype(dtype), np.zeros(fan_out, dtype=dtype)))
    return GlobalModel(layers)


def _weights_and_biases(params: Sequence[Layer]):
    return [p.weight for p in params], [p.bias for p in params]


def forward(params: Sequence[Layer], batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    weights, biases = _weights_and_biases(params)
    if batch.ndim != 2 or batch.shape[1] != weights[0].shape[0]:
        raise DimensionError(
            f"batch shape {batch.shape} does not match input width {weights[0].shape[0]}"
        )
    cache = ForwardCache(weights=list(weights))
    h = batch
    last = len(weights) - 1
    for k, (w, b) in enumerate(zip(weights, biases)):
        if w.shape[0] != h.shape[1] or b.shape != (w.shape[1],):
            raise DimensionError(f"layer {k}: weight {w.shape} / bias {b.shape} vs input {h.shape}")
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre.append(z)
        h = z if k == last else np.maximum(z, 0)
    return h, cache


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} vs {n} logits rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def loss_and_backward(
    logits: np.ndarray, labels: np.ndarray, cache: ForwardCache
) -> tuple[float, list[Layer]]:
    loss, delta = softmax_cross_entropy(logits, labels)
    grads: list[Layer] = [None] * len(cache.weights)  # type: ignore[list-item]
    for k in range(len(cache.weights) - 1, -1, -1):
        grads[k] = Layer(cache.inputs[k].T @ delta, delta.sum(axis=0))
        if k:
            delta = (delta @ cache.weights[k].T) * (cache.pre[k - 1] > 0)
    return loss, grads


def sgd_step(params: Sequence[Layer], grads: Sequence[Layer], lr: float) -> list[Layer]:
    if lr < 0:
        raise SpecificationError(f"learning rate must be non-negative, got {lr}")
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameter layers vs {len(grads)} gradient layers")
    out = []
    for p, g in zip(params, grads):
        if p.weight.shape != g.weight.shape or p.bias.shape != g.bias.shape:
            raise DimensionError("parameter / gradient shape mismatch")
        out.append(Layer(p.weight - lr * g.weight, p.bias - lr * g.bias))
    return out


def predict(params: Sequence[Layer], x: np.ndarray) -> np.ndarray:
    logits, _ = forward(params, x)
    return logits.argmax(axis=1)


def accuracy(params: Sequence[Layer], x: np.ndarray, y: np.ndarray) -> float:
    return float((predict(params, x) == y).mean())


def batch_order(n: int, epoch_rng: np.random.Generator) -> np.ndarray:
    """Shuffle-by-permutation for one epoch."""
    return epoch_rng.permutation(n)


def train_sgd(
    params: Sequence[Layer],
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> tuple[list[Layer], float]:
    """Plain minibatch SGD; returns new parameters and the mean loss of the last epoch."""
    params = [p.copy() for p in params]
    last_loss = float("nan")
    for _ in range(epochs):
        order = batch_order(len(x), rng)
        losses = []
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            logits, cache = forward(params, x[idx])
            loss, grads = loss_and_backward(logits, y[idx], cache)
            params = sgd_step(params, grads, lr)
            losses.append(loss)
        last_loss = float(np.mean(losses))
    return params, last_loss
