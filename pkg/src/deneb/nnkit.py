"""Minimal dense-network engine: forward pass, hand-rolled backprop, SGD.

Parameters and activations are float32 (float64 is honored end-to-end when a
model is built with that dtype, which the gradient checks use); probability
and loss math runs in float64. Everything is seeded and deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container

ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    """Input/parameter dimension mismatch, naming the offending layer."""


class NonFiniteError(ValueError):
    """A gradient or parameter block stopped being finite."""


def rng_for(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for (seed, stream); streams keep trainers' draw
    order stable so degenerate-config equivalences hold bit-exactly."""
    return np.random.default_rng([int(seed), int(stream)])


@dataclass
class Layer:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str = "relu"


@dataclass
class MlpModel:
    layers: list[Layer]
    input_dim: int
    class_count: int

    def validate(self):
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.w.shape[0] != prev:
                raise ShapeError(f"layer {i}: weight rows {layer.w.shape[0]} != incoming dim {prev}")
            if layer.b.shape != (layer.w.shape[1],):
                raise ShapeError(f"layer {i}: bias shape {layer.b.shape} != ({layer.w.shape[1]},)")
            if not (np.isfinite(layer.w).all() and np.isfinite(layer.b).all()):
                raise NonFiniteError(f"layer {i}: non-finite parameters")
            prev = layer.w.shape[1]
        if prev != self.class_count:
            raise ShapeError(f"final layer emits {prev} units, expected class_count {self.class_count}")
        return self

    def copy(self) -> "MlpModel":
        return MlpModel(
            [Layer(l.w.copy(), l.b.copy(), l.activation) for l in self.layers],
            self.input_dim,
            self.class_count,
        )


def init_mlp(input_dim, hidden, class_count, seed, dtype=np.float32) -> MlpModel:
    """Glorot-uniform MLP input_dim -> hidden... -> class_count, ReLU inside,
    identity on the output layer."""
    dims = [int(input_dim), *[int(h) for h in hidden], int(class_count)]
    rng = rng_for(seed, 0)
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        layers.append(Layer(w, b, "relu" if i < len(dims) - 2 else "identity"))
    return MlpModel(layers, dims[0], dims[-1]).validate()


def forward(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Logits for a (rows, input_dim) batch."""
    h = _check_batch(model, batch)
    for layer in model.layers:
        h = h @ layer.w + layer.b
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def forward_cached(model: MlpModel, batch: np.ndarray):
    """Forward pass keeping per-layer pre-activations for backprop."""
    h = _check_batch(model, batch)
    inputs = [h]
    pre_acts = []
    for layer in model.layers:
        z = h @ layer.w + layer.b
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        inputs.append(h)
    return h, (inputs, pre_acts)


def backward(model: MlpModel, cache, dlogits: np.ndarray):
    """Parameter gradients given d(objective)/d(logits); caller owns scaling."""
    inputs, pre_acts = cache
    dz = np.asarray(dlogits, dtype=model.layers[0].w.dtype)
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        grads[i] = (inputs[i].T @ dz, dz.sum(axis=0, dtype=np.float64).astype(dz.dtype))
        if i > 0:
            dz = dz @ layer.w.T
            if model.layers[i - 1].activation == "relu":
                dz = dz * (pre_acts[i - 1] > 0)
    return grads


def _check_batch(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 2:
        raise ShapeError(f"expected 2-d batch, got shape {batch.shape}")
    if batch.shape[1] != model.input_dim:
        raise ShapeError(f"layer 0 expects {model.input_dim} input columns, batch has {batch.shape[1]}")
    return batch


def softmax_temp(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature-scaled softmax over the last axis, max-subtracted, float64."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / float(tau)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    lr_decay: float = 1.0      # multiplicative step decay; 1.0 disables it
    lr_decay_step: int = 30

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.lr_decay_step < 1:
            raise ValueError(f"lr_decay_step must be >= 1, got {self.lr_decay_step}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate after step decay for a 0-based epoch."""
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_step)

    def at_epoch(self, epoch: int) -> "SgdConfig":
        lr = self.lr_at(epoch)
        if lr == self.learning_rate:
            return self
        return SgdConfig(lr, self.momentum, self.weight_decay, self.batch_size, 1.0, self.lr_decay_step)


@dataclass
class SgdState:
    velocity: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: MlpModel) -> "SgdState":
        return cls([(np.zeros_like(l.w), np.zeros_like(l.b)) for l in model.layers])


def sgd_step(model: MlpModel, grads, state: SgdState, cfg: SgdConfig):
    """v <- momentum*v + (grad + wd*theta); theta <- theta - lr*v. Mutates
    model and state in place and returns them."""
    for i, (layer, (gw, gb), (vw, vb)) in enumerate(zip(model.layers, grads, state.velocity)):
        if not np.isfinite(gw).all():
            raise NonFiniteError(f"non-finite gradient in layer {i} weights")
        if not np.isfinite(gb).all():
            raise NonFiniteError(f"non-finite gradient in layer {i} bias")
        np.multiply(vw, cfg.momentum, out=vw)
        vw += gw + cfg.weight_decay * layer.w
        np.multiply(vb, cfg.momentum, out=vb)
        vb += gb + cfg.weight_decay * layer.b
        layer.w -= cfg.learning_rate * vw
        layer.b -= cfg.learning_rate * vb
    return model, state


def sgd_train_step(model, state, x, y, cfg, loss_grad_fn, sample_weights=None) -> float:
    """One minibatch update. `loss_grad_fn(logits, y) -> (losses, dlogits)`
    gives per-sample values; the objective is mean(w_i * loss_i) over the
    batch. Returns that mean."""
    logits, cache = forward_cached(model, x)
    losses, dlogits = loss_grad_fn(logits, y)
    n = x.shape[0]
    if sample_weights is None:
        mean_loss = float(losses.sum(dtype=np.float64) / n)
        dlogits = dlogits / n
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        mean_loss = float((losses * w).sum(dtype=np.float64) / n)
        dlogits = dlogits * (w / n)[:, None]
    sgd_step(model, backward(model, cache, dlogits), state, cfg)
    return mean_loss


def sgd_train_epoch(model, state, features, labels, cfg, loss_grad_fn, order, sample_weights=None) -> float:
    """Sequential minibatches over `order` (an index array); returns the
    epoch's weighted mean loss."""
    total = 0.0
    n = len(order)
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        w = None if sample_weights is None else sample_weights[idx]
        total += sgd_train_step(model, state, features[idx], labels[idx], cfg, loss_grad_fn, w) * len(idx)
    return total / max(n, 1)


def predict_logits(model: MlpModel, features: np.ndarray, batch_size: int = 2048) -> np.ndarray:
    """Deterministic inference forward over a whole feature matrix."""
    chunks = [forward(model, features[i : i + batch_size]) for i in range(0, len(features), batch_size)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, model.class_count), dtype=np.float32)


def save_model(model: MlpModel, path):
    """Checkpoint: layer shapes + little-endian float32 parameter blobs."""
    arrays = {}
    for i, layer in enumerate(model.layers):
        arrays[f"layer{i:02d}.w"] = layer.w.astype("<f4", copy=False)
        arrays[f"layer{i:02d}.b"] = layer.b.astype("<f4", copy=False)
    meta = {
        "kind": "mlp-checkpoint",
        "input_dim": model.input_dim,
        "class_count": model.class_count,
        "activations": [l.activation for l in model.layers],
    }
    return write_container(path, arrays, meta)


def load_model(path) -> MlpModel:
    arrays, meta = read_container(path)
    if meta.get("kind") != "mlp-checkpoint":
        raise ValueError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    layers = [
        Layer(arrays[f"layer{i:02d}.w"], arrays[f"layer{i:02d}.b"], act)
        for i, act in enumerate(meta["activations"])
    ]
    return MlpModel(layers, int(meta["input_dim"]), int(meta["class_count"])).validate()
