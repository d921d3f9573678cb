"""Per-sample classification losses with analytic logit gradients.

Cross-entropy, generalized cross-entropy -- (1 - p[y]^q)/q, which tends to
CE as q -> 0 and to 1 - p[y] at q = 1 -- and symmetric cross-entropy
a*CE + b*RCE with the reverse term's log(0) clamped to -4.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nnkit import MlpModel, predict_logits, softmax_temp

_LOG_FLOOR = 1e-300  # keeps -log(p[y]) finite when p underflows
_RCE_LOG_ZERO = -4.0


def _as_batch(logits, y):
    logits = np.asarray(logits, dtype=np.float64)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits[None, :]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape[0] != logits.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {logits.shape[0]} logit rows")
    if (y < 0).any() or (y >= logits.shape[1]).any():
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    return logits, y, squeeze


def _finish(losses, grads, squeeze):
    if squeeze:
        return float(losses[0]), grads[0]
    return losses, grads


def ce_loss(logits, y_given, tau: float = 1.0):
    """-log softmax(logits/tau)[y]; gradient (p - onehot(y))/tau."""
    logits, y, squeeze = _as_batch(logits, y_given)
    p = softmax_temp(logits, tau)
    rows = np.arange(len(y))
    losses = -np.log(np.maximum(p[rows, y], _LOG_FLOOR))
    grads = p.copy()
    grads[rows, y] -= 1.0
    grads /= tau
    return _finish(losses, grads, squeeze)


def gce_loss(logits, y_given, q: float, tau: float = 1.0):
    """(1 - p[y]^q)/q; gradient is the CE gradient damped by p[y]^q."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must be in (0, 1], got {q}")
    logits, y, squeeze = _as_batch(logits, y_given)
    p = softmax_temp(logits, tau)
    rows = np.arange(len(y))
    py_q = p[rows, y] ** q
    losses = (1.0 - py_q) / q
    grads = p.copy()
    grads[rows, y] -= 1.0
    grads *= (py_q / tau)[:, None]
    return _finish(losses, grads, squeeze)


def sce_loss(logits, y_given, a: float, b: float, tau: float = 1.0):
    """a*CE + b*RCE where RCE = -sum_c p[c]*log(onehot(y)[c]) with
    log(0) := -4, i.e. RCE = 4*(1 - p[y])."""
    if a < 0 or b < 0:
        raise ValueError(f"sce weights must be >= 0, got a={a}, b={b}")
    logits, y, squeeze = _as_batch(logits, y_given)
    p = softmax_temp(logits, tau)
    rows = np.arange(len(y))
    py = p[rows, y]
    ce = -np.log(np.maximum(py, _LOG_FLOOR))
    rce = -_RCE_LOG_ZERO * (1.0 - py)
    losses = a * ce + b * rce
    grads = p.copy()
    grads[rows, y] -= 1.0
    grads *= ((a + b * (-_RCE_LOG_ZERO) * py) / tau)[:, None]
    return _finish(losses, grads, squeeze)


@dataclass
class LossSpec:
    kind: str = "ce"
    q: float = 0.7
    sce_alpha: float = 0.1
    sce_beta: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ce", "gce", "sce"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q must be in (0, 1], got {self.q}")
        if self.sce_alpha < 0 or self.sce_beta < 0:
            raise ValueError("sce weights must be >= 0")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def loss_grad_fn(self):
        """Vectorized (logits, y) -> (losses, dlogits) for this spec."""
        if self.kind == "ce":
            return lambda logits, y: ce_loss(logits, y, self.tau)
        if self.kind == "gce":
            return lambda logits, y: gce_loss(logits, y, self.q, self.tau)
        return lambda logits, y: sce_loss(logits, y, self.sce_alpha, self.sce_beta, self.tau)


@dataclass
class PerSampleLossTable:
    """Epoch-indexed per-sample loss vectors."""

    entries: dict[int, np.ndarray] = field(default_factory=dict)

    def record(self, epoch: int, values: np.ndarray):
        self.entries[int(epoch)] = np.asarray(values, dtype=np.float64)

    def epochs(self):
        return sorted(self.entries)


def per_sample_losses(model: MlpModel, dataset, spec: LossSpec, batch_size: int = 2048) -> np.ndarray:
    """Loss of every sample against its given label, dataset order preserved,
    deterministic inference forward."""
    logits = predict_logits(model, dataset.features, batch_size=batch_size)
    losses, _ = spec.loss_grad_fn()(logits, dataset.y_given)
    return np.atleast_1d(losses)
