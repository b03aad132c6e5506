"""Small dense ReLU network trained with plain mini-batch SGD, in numpy.

The LDP machinery only ever sees per-layer flat vectors, so the network is
kept deliberately simple: ``len(sizes) - 1`` affine layers, ReLU between
them, softmax cross-entropy on top.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass
class ModelWeights:
    """Per-layer ``(W, b)`` with ``W`` shaped ``[out, in]`` and ``b`` shaped ``[out]``."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise ShapeError(
                    f"layer {i} expects {w.shape[1]} inputs but layer {i - 1} emits "
                    f"{self.layers[i - 1][0].shape[0]}"
                )

    @property
    def sizes(self) -> list[int]:
        """Layer widths, input first: ``[in_0, out_0, out_1, ...]``."""
        if not self.layers:
            return []
        return [self.layers[0][0].shape[1]] + [w.shape[0] for w, _ in self.layers]

    @property
    def layer_sizes(self) -> list[int]:
        """Number of scalar parameters per layer (weights then bias)."""
        return [w.size + b.size for w, b in self.layers]

    @property
    def dimension(self) -> int:
        return sum(self.layer_sizes)

    def __len__(self):
        return len(self.layers)

    def layer_vectors(self) -> list[np.ndarray]:
        """Flat per-layer parameter vectors: ``W.ravel()`` followed by ``b``."""
        return [np.concatenate([w.ravel(), b]) for w, b in self.layers]

    def with_layer_vectors(self, vectors: Sequence[np.ndarray]) -> "ModelWeights":
        """Rebuild weights of this shape from flat per-layer vectors."""
        if len(vectors) != len(self.layers):
            raise ShapeError(f"expected {len(self.layers)} layer vectors, got {len(vectors)}")
        layers = []
        for (w, b), v in zip(self.layers, vectors):
            v = np.asarray(v, dtype=float)
            if v.shape != (w.size + b.size,):
                raise ShapeError(f"layer vector of shape {v.shape}, expected ({w.size + b.size},)")
            layers.append((v[: w.size].reshape(w.shape).copy(), v[w.size:].copy()))
        return ModelWeights(layers)

    def copy(self) -> "ModelWeights":
        return ModelWeights([(w.copy(), b.copy()) for w, b in self.layers])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in self.layers)

    def allclose(self, other: "ModelWeights", **kw) -> bool:
        return len(self) == len(other) and all(
            np.allclose(w1, w2, **kw) and np.allclose(b1, b2, **kw)
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )

    def array_equal(self, other: "ModelWeights") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(w1, w2) and np.array_equal(b1, b2)
            for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
        )


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError("one label per feature row required")
        if self.features.shape[0] < 1:
            raise ValueError("dataset is empty")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.03
    batch_size: int = 10
    local_epochs: int = 1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("batch_size and local_epochs must be >= 1")


def init_weights(sizes: Sequence[int], rng: np.random.Generator,
                 scales: Sequence[float] | None = None) -> ModelWeights:
    """Glorot-uniform weights, zero biases.

    ``scales`` optionally multiplies each layer's initial weights, which is
    how heterogeneous per-layer magnitudes are constructed.
    """
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output size")
    if scales is None:
        scales = [1.0] * (len(sizes) - 1)
    if len(scales) != len(sizes) - 1:
        raise ValueError("one scale per layer")
    layers = []
    for fan_in, fan_out, scale in zip(sizes[:-1], sizes[1:], scales):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_out, fan_in)) * scale
        layers.append((w, np.zeros(fan_out)))
    return ModelWeights(layers)


def forward(weights: ModelWeights, x: np.ndarray):
    """Return ``(logits, activations)``; ``activations[i]`` is the input to layer ``i``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != weights.sizes[0]:
        raise ShapeError(f"batch shape {x.shape} does not match input size {weights.sizes[0]}")
    acts = [x]
    h = x
    last = len(weights.layers) - 1
    for i, (w, b) in enumerate(weights.layers):
        z = h @ w.T + b
        if i == last:
            return z, acts
        h = np.maximum(z, 0.0)
        acts.append(h)
    raise ShapeError("model has no layers")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss(weights: ModelWeights, x: np.ndarray, y: np.ndarray) -> float:
    """Mean softmax cross-entropy."""
    logits, _ = forward(weights, x)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(logsum - z[np.arange(len(y)), y]))


def backward(weights: ModelWeights, x: np.ndarray, y: np.ndarray) -> ModelWeights:
    """Gradient of the mean cross-entropy over the batch, same shape as ``weights``."""
    y = np.asarray(y, dtype=np.int64)
    logits, acts = forward(weights, x)
    if y.shape != (logits.shape[0],):
        raise ShapeError("one label per sample required")
    delta = _softmax(logits)
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    grads = []
    for i in range(len(weights.layers) - 1, -1, -1):
        w, _ = weights.layers[i]
        a = acts[i]
        grads.append((delta.T @ a, delta.sum(axis=0)))
        if i:
            delta = (delta @ w) * (a > 0)
    grads.reverse()
    return ModelWeights(grads)


def sgd_step(weights: ModelWeights, grad: ModelWeights, lr: float) -> ModelWeights:
    return ModelWeights([(w - lr * gw, b - lr * gb)
                         for (w, b), (gw, gb) in zip(weights.layers, grad.layers)])


def sgd_epochs(weights: ModelWeights, data: Dataset, config: SgdConfig,
               rng: np.random.Generator, epoch_losses: list | None = None) -> ModelWeights:
    """Run ``config.local_epochs`` epochs of shuffled mini-batch SGD.

    The input is not modified. If ``epoch_losses`` is given, the mean batch
    loss of each epoch is appended to it.
    """
    w = weights.copy()
    n = len(data)
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = data.features[idx], data.labels[idx]
            if epoch_losses is not None:
                batch_losses.append(loss(w, xb, yb))
            if config.learning_rate:
                w = sgd_step(w, backward(w, xb, yb), config.learning_rate)
        if epoch_losses is not None:
            epoch_losses.append(float(np.mean(batch_losses)))
    return w


def predict(weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    logits, _ = forward(weights, x)
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(logits, axis=1)


def evaluate(weights: ModelWeights, data: Dataset) -> float:
    return float(np.mean(predict(weights, data.features) == data.labels))
