"""Three-stage robust training: prejudice model, entropy-proportional
sampling probabilities, then denoised training on resampled mini-batches.

Stage 1 deliberately deepens the bias (either by training only on the GMM's
high-clean-posterior subset after a warm-up, or by GCE which upweights
easy-to-learn samples). Stage 2 scores every sample by prediction entropy,
which needs no labels. Stage 3 draws mini-batches with probability
proportional to those scores and runs a pluggable denoiser on them.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasets import LabeledDataset, quadrant_masks
from .gmm import DegenerateDataError, SplitResult, fit_em, posterior_clean, split_by_threshold
from .losses import LossSpec, PerSampleLossTable, per_sample_losses
from .nnkit import (
    MlpModel,
    SgdConfig,
    SgdState,
    init_mlp,
    predict_logits,
    rng_for,
    sgd_train_epoch,
    sgd_train_step,
    softmax_temp,
)

STREAM_ORDER = 1
STREAM_SAMPLER = 2
PEER_SEED_OFFSET = 104729  # decorrelates the co-teaching peer's init


@dataclass
class DenoiserSpec:
    kind: str = "gce"
    q: float = 0.7                # gce
    forget_rate: float = 0.2      # coteaching
    num_gradual: int = 5          # coteaching
    percentile: float = 10.0      # aum

    def __post_init__(self):
        if self.kind not in ("gce", "ce", "coteaching", "aum"):
            raise ValueError(f"unknown denoiser kind {self.kind!r}")
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"gce q must be in (0, 1], got {self.q}")
        if not 0.0 <= self.forget_rate < 1.0:
            raise ValueError(f"forget_rate must be in [0, 1), got {self.forget_rate}")
        if self.num_gradual < 0:
            raise ValueError(f"num_gradual must be >= 0, got {self.num_gradual}")
        if not 0.0 < self.percentile < 100.0:
            raise ValueError(f"percentile must be in (0, 100), got {self.percentile}")


@dataclass
class DenebConfig:
    clean_threshold: float = 0.1   # posterior cut selecting the kept subset
    tau: float = 1.0               # entropy-scoring temperature
    loss_tau: float = 1.0          # temperature inside the GCE prejudice loss
    warmup_epochs: int = 5
    gce_q: float = 0.5
    prejudice_epochs: int = 30
    robust_epochs: int = 30
    prejudice_strategy: str = "gmm"      # "gmm" | "gce"
    entropy_mode: str | None = None      # None -> strategy default
    denoiser: DenoiserSpec = field(default_factory=DenoiserSpec)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    hidden: tuple = (256, 128)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.clean_threshold <= 1.0:
            raise ValueError(f"clean_threshold must be in [0, 1], got {self.clean_threshold}")
        if self.tau <= 0 or self.loss_tau <= 0:
            raise ValueError("temperatures must be positive")
        if not 0.0 < self.gce_q <= 1.0:
            raise ValueError(f"gce_q must be in (0, 1], got {self.gce_q}")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.prejudice_epochs:
            raise ValueError(
                f"warmup_epochs must lie in [0, prejudice_epochs], got {self.warmup_epochs}"
            )
        if self.prejudice_strategy not in ("gmm", "gce"):
            raise ValueError(f"unknown prejudice strategy {self.prejudice_strategy!r}")
        if self.entropy_mode not in (None, "final", "epoch_averaged"):
            raise ValueError(f"unknown entropy_mode {self.entropy_mode!r}")
        self.hidden = tuple(int(h) for h in self.hidden)

    def resolved_entropy_mode(self) -> str:
        if self.entropy_mode is not None:
            return self.entropy_mode
        return "final" if self.prejudice_strategy == "gmm" else "epoch_averaged"


@dataclass
class EntropyTable:
    """Per-epoch, per-sample prediction entropies from the prejudice model."""

    history: np.ndarray  # (epochs, N)

    def final(self) -> np.ndarray:
        if len(self.history) == 0:
            raise ValueError("no recorded epochs")
        return self.history[-1]

    def margin(self) -> np.ndarray:
        return entropy_margin(self.history)


@dataclass
class SamplingDistribution:
    p: np.ndarray  # nonnegative, sums to 1

    def __len__(self):
        return len(self.p)


def entropy_scores(model: MlpModel, dataset, tau: float, batch_size: int = 2048) -> np.ndarray:
    """Prediction entropy -sum_c p_c log p_c under temperature-tau softmax;
    label-free, one value per sample in [0, ln C]."""
    logits = predict_logits(model, dataset.features, batch_size=batch_size)
    probs = softmax_temp(logits, tau)
    plogp = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    h = -plogp.sum(axis=1)
    return np.clip(h, 0.0, math.log(model.class_count))


def entropy_margin(history) -> np.ndarray:
    """Elementwise mean of per-epoch entropy vectors."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 2 or history.shape[0] == 0:
        raise ValueError(f"need a nonempty (epochs, N) history, got shape {history.shape}")
    return history.mean(axis=0)


def sampling_distribution(scores) -> SamplingDistribution:
    """Normalize nonnegative scores into draw probabilities; an all-zero
    score vector falls back to the uniform distribution."""
    scores = np.asarray(scores, dtype=np.float64)
    if (scores < 0).any():
        raise ValueError("scores must be nonnegative")
    total = scores.sum()
    if total == 0.0:
        p = np.full(len(scores), 1.0 / len(scores))
    else:
        p = scores / total
        p = p / p.sum()
    return SamplingDistribution(p)


def sample_batch(dist: SamplingDistribution, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """batch_size i.i.d. multinomial index draws (with replacement)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return rng.choice(len(dist.p), size=batch_size, replace=True, p=dist.p)


def coteaching_retention(epoch: int, forget_rate: float, num_gradual: int) -> float:
    """Kept fraction R(e) = 1 - forget_rate * min(e / num_gradual, 1)."""
    ramp = 1.0 if num_gradual == 0 else min(epoch / num_gradual, 1.0)
    return 1.0 - forget_rate * ramp


@dataclass
class PrejudiceResult:
    model: MlpModel
    entropy: EntropyTable
    split_log: list[SplitResult] = field(default_factory=list)
    loss_table: PerSampleLossTable = field(default_factory=PerSampleLossTable)
    epoch_losses: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def train_prejudice_gmm(dataset: LabeledDataset, cfg: DenebConfig) -> PrejudiceResult:
    """Warm up with CE on everything, then each epoch refit the loss GMM and
    train only on samples whose clean posterior clears the threshold."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model = init_mlp(dataset.features.shape[1], cfg.hidden, dataset.class_count, cfg.seed)
    state = SgdState.for_model(model)
    order_rng = rng_for(cfg.seed, STREAM_ORDER)
    ce_spec = LossSpec("ce")
    ce_fn = ce_spec.loss_grad_fn()
    result = PrejudiceResult(model, EntropyTable(np.zeros((0, len(dataset)))))
    history = []
    for epoch in range(cfg.prejudice_epochs):
        train_idx = np.arange(len(dataset))
        if epoch >= cfg.warmup_epochs:
            losses = per_sample_losses(model, dataset, ce_spec)
            result.loss_table.record(epoch, losses)
            split = None
            try:
                mixture = fit_em(losses)
                posteriors = posterior_clean(mixture, losses)
                split = split_by_threshold(dataset, posteriors, cfg.clean_threshold)
            except DegenerateDataError as exc:
                result.warnings.append(f"epoch {epoch}: GMM fit degenerate ({exc}); using full dataset")
            if split is not None:
                if len(split.kept_indices) == 0:
                    result.warnings.append(f"epoch {epoch}: kept subset empty; using full dataset")
                else:
                    result.split_log.append(split)
                    train_idx = split.kept_indices
        order = train_idx[order_rng.permutation(len(train_idx))]
        mean_loss = sgd_train_epoch(
            model, state, dataset.features, dataset.y_given, cfg.sgd.at_epoch(epoch), ce_fn, order
        )
        result.epoch_losses.append(mean_loss)
        history.append(entropy_scores(model, dataset, cfg.tau))
    result.entropy = EntropyTable(np.asarray(history).reshape(len(history), len(dataset)))
    return result


def train_prejudice_gce(dataset: LabeledDataset, cfg: DenebConfig) -> PrejudiceResult:
    """Every epoch trains on the full dataset with GCE (which emphasizes
    easy-to-learn samples) and records that epoch's entropy vector."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    model = init_mlp(dataset.features.shape[1], cfg.hidden, dataset.class_count, cfg.seed)
    state = SgdState.for_model(model)
    order_rng = rng_for(cfg.seed, STREAM_ORDER)
    gce_fn = LossSpec("gce", q=cfg.gce_q, tau=cfg.loss_tau).loss_grad_fn()
    result = PrejudiceResult(model, EntropyTable(np.zeros((0, len(dataset)))))
    history = []
    for epoch in range(cfg.prejudice_epochs):
        order = order_rng.permutation(len(dataset))
        mean_loss = sgd_train_epoch(
            model, state, dataset.features, dataset.y_given, cfg.sgd.at_epoch(epoch), gce_fn, order
        )
        result.epoch_losses.append(mean_loss)
        history.append(entropy_scores(model, dataset, cfg.tau))
    result.entropy = EntropyTable(np.asarray(history).reshape(len(history), len(dataset)))
    return result


@dataclass
class RobustResult:
    model: MlpModel
    peer_model: MlpModel | None = None
    removed_indices: np.ndarray | None = None  # aum only
    margin_scores: np.ndarray | None = None    # aum only
    epoch_losses: list[float] = field(default_factory=list)


def _margins(model: MlpModel, dataset: LabeledDataset) -> np.ndarray:
    """logit[y_given] minus the best other logit, per sample."""
    logits = predict_logits(model, dataset.features).astype(np.float64)
    rows = np.arange(len(dataset))
    assigned = logits[rows, dataset.y_given].copy()
    logits[rows, dataset.y_given] = -np.inf
    return assigned - logits.max(axis=1)


def train_robust(dataset: LabeledDataset, dist: SamplingDistribution, denoiser: DenoiserSpec,
                 cfg: DenebConfig) -> RobustResult:
    """Final-stage training: every batch is drawn from the sampling
    distribution, and the denoiser decides how the batch is used."""
    if len(dist) != len(dataset):
        raise ValueError(f"distribution over {len(dist)} samples, dataset has {len(dataset)}")
    n = len(dataset)
    batches_per_epoch = math.ceil(n / cfg.sgd.batch_size)
    batch_rng = rng_for(cfg.seed, STREAM_SAMPLER)
    features, labels = dataset.features, dataset.y_given
    ce_fn = LossSpec("ce").loss_grad_fn()

    if denoiser.kind in ("ce", "gce"):
        spec = LossSpec("ce") if denoiser.kind == "ce" else LossSpec("gce", q=denoiser.q)
        fn = spec.loss_grad_fn()
        model = init_mlp(features.shape[1], cfg.hidden, dataset.class_count, cfg.seed)
        state = SgdState.for_model(model)
        result = RobustResult(model)
        for epoch in range(cfg.robust_epochs):
            epoch_sgd = cfg.sgd.at_epoch(epoch)
            total = 0.0
            for _ in range(batches_per_epoch):
                idx = sample_batch(dist, cfg.sgd.batch_size, batch_rng)
                total += sgd_train_step(model, state, features[idx], labels[idx], epoch_sgd, fn)
            result.epoch_losses.append(total / batches_per_epoch)
        return result

    if denoiser.kind == "coteaching":
        model_a = init_mlp(features.shape[1], cfg.hidden, dataset.class_count, cfg.seed)
        model_b = init_mlp(features.shape[1], cfg.hidden, dataset.class_count, cfg.seed + PEER_SEED_OFFSET)
        state_a, state_b = SgdState.for_model(model_a), SgdState.for_model(model_b)
        result = RobustResult(model_a, peer_model=model_b)
        for epoch in range(cfg.robust_epochs):
            keep = coteaching_retention(epoch, denoiser.forget_rate, denoiser.num_gradual)
            epoch_sgd = cfg.sgd.at_epoch(epoch)
            total = 0.0
            for _ in range(batches_per_epoch):
                idx = sample_batch(dist, cfg.sgd.batch_size, batch_rng)
                x, y = features[idx], labels[idx]
                k = max(1, int(round(keep * len(idx))))
                losses_a, _ = ce_fn(predict_logits(model_a, x, batch_size=len(x)), y)
                losses_b, _ = ce_fn(predict_logits(model_b, x, batch_size=len(x)), y)
                sel_a = np.argsort(losses_a, kind="stable")[:k]
                sel_b = np.argsort(losses_b, kind="stable")[:k]
                # each peer trains on the samples the *other* peer found easy
                total += sgd_train_step(model_a, state_a, x[sel_b], y[sel_b], epoch_sgd, ce_fn)
                sgd_train_step(model_b, state_b, x[sel_a], y[sel_a], epoch_sgd, ce_fn)
            result.epoch_losses.append(total / batches_per_epoch)
        return result

    # aum: preliminary pass accumulates margins, low-margin samples are
    # removed, and a fresh model retrains on the retained resampled batches.
    probe = init_mlp(features.shape[1], cfg.hidden, dataset.class_count, cfg.seed)
    probe_state = SgdState.for_model(probe)
    margin_sum = np.zeros(n, dtype=np.float64)
    epochs = cfg.robust_epochs
    for epoch in range(epochs):
        epoch_sgd = cfg.sgd.at_epoch(epoch)
        for _ in range(batches_per_epoch):
            idx = sample_batch(dist, cfg.sgd.batch_size, batch_rng)
            sgd_train_step(probe, probe_state, features[idx], labels[idx], epoch_sgd, ce_fn)
        margin_sum += _margins(probe, dataset)
    if epochs == 0:
        return RobustResult(probe, removed_indices=np.zeros(0, dtype=np.int64), margin_scores=margin_sum)
    avg_margin = margin_sum / epochs
    threshold = np.percentile(avg_margin, denoiser.percentile)
    removed = avg_margin < threshold
    kept_p = dist.p.copy()
    kept_p[removed] = 0.0
    if kept_p.sum() == 0.0:
        kept_p = (~removed).astype(np.float64)
    retrain_dist = sampling_distribution(kept_p)
    model = init_mlp(features.shape[1], cfg.hidden, dataset.class_count, cfg.seed)
    state = SgdState.for_model(model)
    result = RobustResult(model, removed_indices=np.flatnonzero(removed), margin_scores=avg_margin)
    for epoch in range(epochs):
        epoch_sgd = cfg.sgd.at_epoch(epoch)
        total = 0.0
        for _ in range(batches_per_epoch):
            idx = sample_batch(retrain_dist, cfg.sgd.batch_size, batch_rng)
            total += sgd_train_step(model, state, features[idx], labels[idx], epoch_sgd, ce_fn)
        result.epoch_losses.append(total / batches_per_epoch)
    return result


@dataclass
class RunReport:
    """Serializable record of one full pipeline run. The sampling
    probabilities travel separately (container side-channel), not in JSON."""

    config: dict
    stage_seconds: dict[str, float] = field(default_factory=dict)
    epoch_losses: dict[str, list] = field(default_factory=dict)
    quadrant_counts: dict[str, int] = field(default_factory=dict)
    score_summary: dict[str, dict] = field(default_factory=dict)
    distribution_summary: dict = field(default_factory=dict)
    accuracies: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    sampling_p: np.ndarray | None = None
    entropy: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "stage_seconds": self.stage_seconds,
            "epoch_losses": self.epoch_losses,
            "quadrant_counts": self.quadrant_counts,
            "score_summary": self.score_summary,
            "distribution_summary": self.distribution_summary,
            "accuracies": self.accuracies,
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(
            config=data.get("config", {}),
            stage_seconds=data.get("stage_seconds", {}),
            epoch_losses=data.get("epoch_losses", {}),
            quadrant_counts=data.get("quadrant_counts", {}),
            score_summary=data.get("score_summary", {}),
            distribution_summary=data.get("distribution_summary", {}),
            accuracies=data.get("accuracies", {}),
            warnings=data.get("warnings", []),
        )

    def rows(self, run_id: str = "run") -> list[tuple]:
        out = []
        for stage, losses in self.epoch_losses.items():
            for epoch, value in enumerate(losses):
                out.append((run_id, stage, f"epoch{epoch:04d}_loss", "", value))
        for quadrant, count in self.quadrant_counts.items():
            out.append((run_id, "dataset", "count", quadrant, count))
        for quadrant, stats in self.score_summary.items():
            for name, value in stats.items():
                out.append((run_id, "scoring", f"entropy_{name}", quadrant, value))
        for name, value in self.distribution_summary.items():
            out.append((run_id, "scoring", f"distribution_{name}", "", value))
        for name, value in self.accuracies.items():
            out.append((run_id, "evaluation", name, "", value))
        return out


@dataclass
class DenebRunResult:
    model: MlpModel
    report: RunReport
    prejudice: PrejudiceResult
    distribution: SamplingDistribution
    robust: RobustResult


class StageError(RuntimeError):
    """Failure annotated with the pipeline stage it came from."""


def _quadrant_score_summary(scores: np.ndarray, dataset: LabeledDataset) -> dict:
    summary = {}
    for name, mask in quadrant_masks(dataset).items():
        if mask.any():
            vals = scores[mask]
            summary[name] = {
                "mean": float(vals.mean()),
                "min": float(vals.min()),
                "max": float(vals.max()),
            }
        else:
            summary[name] = {"mean": float("nan"), "min": float("nan"), "max": float("nan")}
    return summary


def run_deneb(dataset: LabeledDataset, cfg: DenebConfig,
              test_set: LabeledDataset | None = None) -> DenebRunResult:
    """Full pipeline; the report captures per-stage timings, per-epoch
    losses, quadrant diagnostics, and final accuracies."""
    report = RunReport(config=_config_dict(cfg))
    timings = report.stage_seconds

    t0 = time.perf_counter()
    try:
        if cfg.prejudice_strategy == "gmm":
            prejudice = train_prejudice_gmm(dataset, cfg)
        else:
            prejudice = train_prejudice_gce(dataset, cfg)
    except Exception as exc:
        raise StageError(f"prejudice stage failed: {exc}") from exc
    timings["prejudice"] = time.perf_counter() - t0
    report.epoch_losses["prejudice"] = prejudice.epoch_losses
    report.warnings.extend(prejudice.warnings)

    t0 = time.perf_counter()
    try:
        if len(prejudice.entropy.history) == 0:
            scores = np.zeros(len(dataset))
        elif cfg.resolved_entropy_mode() == "final":
            scores = prejudice.entropy.final()
        else:
            scores = prejudice.entropy.margin()
        dist = sampling_distribution(scores)
    except Exception as exc:
        raise StageError(f"scoring stage failed: {exc}") from exc
    timings["scoring"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        robust = train_robust(dataset, dist, cfg.denoiser, cfg)
    except Exception as exc:
        raise StageError(f"robust stage failed: {exc}") from exc
    timings["robust"] = time.perf_counter() - t0
    report.epoch_losses["robust"] = robust.epoch_losses

    from .datasets import quadrant_counts as _qc

    report.quadrant_counts = _qc(dataset)
    report.score_summary = _quadrant_score_summary(scores, dataset)
    report.distribution_summary = {
        "min": float(dist.p.min()),
        "max": float(dist.p.max()),
        "sum": float(dist.p.sum()),
        "uniform_ratio_max": float(dist.p.max() * len(dataset)),
    }
    report.sampling_p = dist.p
    report.entropy = scores

    preds = predict_logits(robust.model, dataset.features).argmax(axis=1)
    report.accuracies["train_given_label"] = float((preds == dataset.y_given).mean())
    if test_set is not None:
        test_preds = predict_logits(robust.model, test_set.features).argmax(axis=1)
        report.accuracies["unbiased_test"] = float((test_preds == test_set.y_true).mean())
    return DenebRunResult(robust.model, report, prejudice, dist, robust)


def _config_dict(cfg: DenebConfig) -> dict:
    data = asdict(cfg)
    data["hidden"] = list(cfg.hidden)
    return data
