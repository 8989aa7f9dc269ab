"""Dense feed-forward network with hand-written forward/backward passes.

Parameters are kept as an ordered list of (weight, bias) blocks so the
federated code can share or personalize whole layers by index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class GradientBlock:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, other) -> "GradientBlock":
        return cls([np.zeros_like(w) for w in other.weights],
                   [np.zeros_like(b) for b in other.biases])

    def flatten(self) -> np.ndarray:
        return _flatten(self.weights, self.biases, len(self.weights))


@dataclass
class LayeredWeights:
    """Model parameters, one (W[out, in], b[out]) pair per dense layer.

    ``split_point`` is the (possibly fractional) number of leading layers
    that are shared with the server; the rest are personalized.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    split_point: float = field(default=-1.0)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("weights and biases must be non-empty and of equal length")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: bias shape {b.shape} does not match weight {w.shape}")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k}: input width {w.shape[1]} != output width "
                    f"{self.weights[k - 1].shape[0]} of layer {k - 1}")
        if self.split_point < 0:
            self.split_point = float(len(self.weights))
        if not 0 <= self.split_point <= len(self.weights):
            raise ShapeError(f"split_point {self.split_point} outside [0, {len(self.weights)}]")

    @property
    def total_layers(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "LayeredWeights":
        return LayeredWeights([w.copy() for w in self.weights],
                              [b.copy() for b in self.biases], self.split_point)

    def flatten(self, n_layers: int | None = None) -> np.ndarray:
        """Concatenate W then b of each of the first ``n_layers`` layers."""
        n = self.total_layers if n_layers is None else n_layers
        return _flatten(self.weights, self.biases, n)

    def unflatten(self, vec: np.ndarray) -> "LayeredWeights":
        """Inverse of ``flatten()`` over this architecture."""
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.num_params():
            raise ShapeError(f"vector of size {vec.size} does not fit {self.num_params()} parameters")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return LayeredWeights(weights, biases, self.split_point)

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def same_shape(self, other) -> bool:
        return (len(self.weights) == len(other.weights)
                and all(a.shape == b.shape for a, b in zip(self.weights, other.weights)))


def _flatten(weights, biases, n):
    parts = []
    for w, b in zip(weights[:n], biases[:n]):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.5
    lr_decay: float = 0.95
    local_epochs: int = 2
    batch_size: int = 50
    prox_mu: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if int(self.local_epochs) != self.local_epochs or self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be an integer >= 1, got {self.local_epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be an integer >= 1, got {self.batch_size}")
        if not self.prox_mu >= 0:
            raise ConfigError(f"prox_mu must be >= 0, got {self.prox_mu}")


def init_weights(widths: list[int], rng: np.random.Generator,
                 split_point: float | None = None) -> LayeredWeights:
    """Glorot-uniform weights, zero biases."""
    if len(widths) < 2:
        raise ShapeError("need at least input and output widths")
    weights, biases = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        limit = math.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return LayeredWeights(weights, biases, -1.0 if split_point is None else float(split_point))


def forward(model: LayeredWeights, batch: np.ndarray):
    """Return (logits, cache). ReLU on hidden layers, identity on the output."""
    a = np.asarray(batch, dtype=float)
    if a.ndim != 2:
        raise ShapeError(f"batch must be 2-D, got shape {a.shape}")
    inputs = []
    last = model.total_layers - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        if a.shape[1] != w.shape[1]:
            raise ShapeError(f"layer {k}: expects width {w.shape[1]}, got {a.shape[1]}")
        inputs.append(a)
        z = a @ w.T + b
        a = z if k == last else np.maximum(z, 0.0)
    return a, inputs


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax_rows: non-finite input")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def backward(model: LayeredWeights, cache, labels: np.ndarray, logits: np.ndarray | None = None) -> GradientBlock:
    """Gradient of mean cross-entropy w.r.t. every parameter.

    ``cache`` is the second value returned by ``forward``; passing the
    logits avoids recomputing the last layer.
    """
    labels = np.asarray(labels)
    n_out = model.weights[-1].shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= n_out):
        raise ValueError(f"labels must lie in [0, {n_out})")
    inputs = cache
    if logits is None:
        logits = inputs[-1] @ model.weights[-1].T + model.biases[-1]
    n = len(labels)
    delta = softmax_rows(logits)
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    gw = [None] * model.total_layers
    gb = [None] * model.total_layers
    for k in range(model.total_layers - 1, -1, -1):
        a_in = inputs[k]
        gw[k] = delta.T @ a_in
        gb[k] = delta.sum(axis=0)
        if k > 0:
            # a_in is the ReLU output of layer k-1, so a_in > 0 marks the active units
            delta = (delta @ model.weights[k]) * (a_in > 0)
    return GradientBlock(gw, gb)


def sgd_step(model: LayeredWeights, grads: GradientBlock, velocity: GradientBlock,
             cfg: TrainConfig, global_anchor: LayeredWeights | None = None,
             lr: float | None = None):
    """One momentum-SGD update; returns (new_model, new_velocity).

    With ``cfg.prox_mu > 0`` the proximal gradient mu * (w - anchor) is added.
    """
    if cfg.prox_mu > 0 and global_anchor is None:
        raise ConfigError("prox_mu > 0 requires a global anchor model")
    if not (model.same_shape(grads) and model.same_shape(velocity)):
        raise ShapeError("model, gradients and velocity are not shape-congruent")
    step = cfg.learning_rate if lr is None else lr
    new_w, new_b, vel_w, vel_b = [], [], [], []
    for k in range(model.total_layers):
        gw, gb = grads.weights[k], grads.biases[k]
        if cfg.prox_mu > 0:
            gw = gw + cfg.prox_mu * (model.weights[k] - global_anchor.weights[k])
            gb = gb + cfg.prox_mu * (model.biases[k] - global_anchor.biases[k])
        vw = cfg.momentum * velocity.weights[k] + gw
        vb = cfg.momentum * velocity.biases[k] + gb
        vel_w.append(vw)
        vel_b.append(vb)
        new_w.append(model.weights[k] - step * vw)
        new_b.append(model.biases[k] - step * vb)
    return LayeredWeights(new_w, new_b, model.split_point), GradientBlock(vel_w, vel_b)


def local_train(model: LayeredWeights, data, cfg: TrainConfig, round_idx: int,
                rng: np.random.Generator, global_anchor: LayeredWeights | None = None) -> LayeredWeights:
    """E epochs of shuffled mini-batch SGD at rate lr * decay**(round_idx - 1).

    ``round_idx`` counts communication rounds from 1. The momentum buffer
    starts from zero on every call.
    """
    n = len(data.labels)
    if n == 0:
        raise DataError("local_train: empty dataset")
    lr = cfg.learning_rate * cfg.lr_decay ** max(round_idx - 1, 0)
    velocity = GradientBlock.zeros_like(model)
    w = model
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, cache = forward(w, data.features[idx])
            grads = backward(w, cache, data.labels[idx], logits)
            w, velocity = sgd_step(w, grads, velocity, cfg, global_anchor, lr)
    return w


def predict(model: LayeredWeights, features: np.ndarray) -> np.ndarray:
    logits, _ = forward(model, features)
    return logits.argmax(axis=1)


def loss(model: LayeredWeights, data) -> float:
    logits, _ = forward(model, data.features)
    return cross_entropy(logits, data.labels)
