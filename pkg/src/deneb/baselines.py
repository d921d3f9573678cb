"""Reference trainers: plain CE, loss-ratio reweighting with a biased/
debiased model pair, and error-set upweighting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import LabeledDataset
from .losses import LossSpec
from .nnkit import (
    MlpModel,
    SgdConfig,
    SgdState,
    forward_cached,
    init_mlp,
    predict_logits,
    rng_for,
    sgd_train_epoch,
    backward,
    sgd_step,
)
from .pipeline import PEER_SEED_OFFSET, STREAM_ORDER


@dataclass
class TrainResult:
    model: MlpModel
    epoch_losses: list[float] = field(default_factory=list)


def train_vanilla(dataset: LabeledDataset, sgd: SgdConfig, epochs: int, seed: int,
                  hidden=(256, 128)) -> TrainResult:
    """CE on given labels over per-epoch shuffled sequential mini-batches."""
    model = init_mlp(dataset.features.shape[1], hidden, dataset.class_count, seed)
    state = SgdState.for_model(model)
    order_rng = rng_for(seed, STREAM_ORDER)
    ce_fn = LossSpec("ce").loss_grad_fn()
    result = TrainResult(model)
    for epoch in range(epochs):
        order = order_rng.permutation(len(dataset))
        result.epoch_losses.append(
            sgd_train_epoch(model, state, dataset.features, dataset.y_given, sgd.at_epoch(epoch),
                            ce_fn, order)
        )
    return result


def relative_difficulty_weight(loss_b, loss_d):
    """w = L_b / (L_b + L_d); 0.5 where both losses vanish."""
    loss_b = np.asarray(loss_b, dtype=np.float64)
    loss_d = np.asarray(loss_d, dtype=np.float64)
    if (loss_b < 0).any() or (loss_d < 0).any():
        raise ValueError("losses must be nonnegative")
    total = loss_b + loss_d
    with np.errstate(invalid="ignore"):
        w = np.where(total > 0, loss_b / np.where(total > 0, total, 1.0), 0.5)
    return float(w) if w.ndim == 0 else w


@dataclass
class LffConfig:
    gce_q: float = 0.7
    ema_alpha: float = 0.7
    sgd: SgdConfig = field(default_factory=SgdConfig)
    hidden: tuple = (256, 128)
    seed: int = 0
    freeze_weights: bool = False  # diagnostic: forces w = 1 on the debiased model

    def __post_init__(self):
        if not 0.0 < self.gce_q <= 1.0:
            raise ValueError(f"gce_q must be in (0, 1], got {self.gce_q}")
        if not 0.0 < self.ema_alpha < 1.0:
            raise ValueError(f"ema_alpha must be in (0, 1), got {self.ema_alpha}")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class LffResult:
    model: MlpModel          # debiased model
    biased_model: MlpModel
    weights: np.ndarray      # final per-sample relative-difficulty weights
    epoch_losses: list[float] = field(default_factory=list)


def train_lff(dataset: LabeledDataset, cfg: LffConfig, epochs: int) -> LffResult:
    """Per batch: the biased model steps on GCE, per-sample CE losses of both
    models update EMAs, and the debiased model steps on CE weighted by the
    loss ratio."""
    n = len(dataset)
    model_d = init_mlp(dataset.features.shape[1], cfg.hidden, dataset.class_count, cfg.seed)
    model_b = init_mlp(dataset.features.shape[1], cfg.hidden, dataset.class_count,
                       cfg.seed + PEER_SEED_OFFSET)
    state_d, state_b = SgdState.for_model(model_d), SgdState.for_model(model_b)
    order_rng = rng_for(cfg.seed, STREAM_ORDER)
    ce_fn = LossSpec("ce").loss_grad_fn()
    gce_fn = LossSpec("gce", q=cfg.gce_q).loss_grad_fn()
    ema_b = np.full(n, np.nan)
    ema_d = np.full(n, np.nan)
    features, labels = dataset.features, dataset.y_given
    result = LffResult(model_d, model_b, np.full(n, 0.5))

    for epoch in range(epochs):
        epoch_sgd = cfg.sgd.at_epoch(epoch)
        order = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.sgd.batch_size):
            idx = order[start : start + cfg.sgd.batch_size]
            x, y = features[idx], labels[idx]

            logits_b, cache_b = forward_cached(model_b, x)
            logits_d, cache_d = forward_cached(model_d, x)
            ce_b, _ = ce_fn(logits_b, y)
            ce_d, _ = ce_fn(logits_d, y)
            fresh_b = np.isnan(ema_b[idx])
            fresh_d = np.isnan(ema_d[idx])
            ema_b[idx] = np.where(fresh_b, ce_b, cfg.ema_alpha * ema_b[idx] + (1 - cfg.ema_alpha) * ce_b)
            ema_d[idx] = np.where(fresh_d, ce_d, cfg.ema_alpha * ema_d[idx] + (1 - cfg.ema_alpha) * ce_d)

            _, dlogits_b = gce_fn(logits_b, y)
            sgd_step(model_b, backward(model_b, cache_b, dlogits_b / len(idx)), state_b, epoch_sgd)
            losses_d, dlogits_d = ce_fn(logits_d, y)
            if cfg.freeze_weights:
                total += float(losses_d.sum() / len(idx))
                scaled = dlogits_d / len(idx)
            else:
                w = relative_difficulty_weight(ema_b[idx], ema_d[idx])
                total += float((losses_d * w).sum() / len(idx))
                scaled = dlogits_d * (w / len(idx))[:, None]
            sgd_step(model_d, backward(model_d, cache_d, scaled), state_d, epoch_sgd)
        result.epoch_losses.append(total / max(1, -(-n // cfg.sgd.batch_size)))

    result.weights = relative_difficulty_weight(np.nan_to_num(ema_b, nan=0.0),
                                                np.nan_to_num(ema_d, nan=0.0))
    return result


def jtt_error_set(model: MlpModel, dataset: LabeledDataset) -> np.ndarray:
    """Indices where argmax prediction (ties -> lowest class index) differs
    from the given label."""
    preds = predict_logits(model, dataset.features).argmax(axis=1)
    return np.flatnonzero(preds != dataset.y_given)


@dataclass
class JttConfig:
    bias_epochs: int = 1
    lambda_up: int = 50
    sgd: SgdConfig = field(default_factory=SgdConfig)
    hidden: tuple = (256, 128)
    seed: int = 0
    max_duplicated_indices: int = 50_000_000

    def __post_init__(self):
        if self.bias_epochs < 1:
            raise ValueError(f"bias_epochs must be >= 1, got {self.bias_epochs}")
        if self.lambda_up < 1:
            raise ValueError(f"lambda_up must be >= 1, got {self.lambda_up}")
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class JttResult:
    model: MlpModel
    bias_model: MlpModel
    error_set: np.ndarray
    epoch_losses: list[float] = field(default_factory=list)


def train_jtt(dataset: LabeledDataset, cfg: JttConfig, epochs: int) -> JttResult:
    """Phase 1 trains plainly for bias_epochs; phase 2 retrains from scratch
    on an index list where error-set samples appear lambda_up times."""
    phase1 = train_vanilla(dataset, cfg.sgd, cfg.bias_epochs, cfg.seed, cfg.hidden)
    error_set = jtt_error_set(phase1.model, dataset)

    n = len(dataset)
    total_len = n + (cfg.lambda_up - 1) * len(error_set)
    if total_len > cfg.max_duplicated_indices:
        raise MemoryError(
            f"duplicated index list would hold {total_len} entries "
            f"(budget {cfg.max_duplicated_indices}); lower lambda_up"
        )
    indices = np.concatenate([np.arange(n)] + [error_set] * (cfg.lambda_up - 1)) \
        if cfg.lambda_up > 1 else np.arange(n)

    model = init_mlp(dataset.features.shape[1], cfg.hidden, dataset.class_count, cfg.seed)
    state = SgdState.for_model(model)
    order_rng = rng_for(cfg.seed, STREAM_ORDER)
    ce_fn = LossSpec("ce").loss_grad_fn()
    result = JttResult(model, phase1.model, error_set)
    for epoch in range(epochs):
        order = indices[order_rng.permutation(len(indices))]
        result.epoch_losses.append(
            sgd_train_epoch(model, state, dataset.features, dataset.y_given, cfg.sgd.at_epoch(epoch),
                            ce_fn, order)
        )
    return result
