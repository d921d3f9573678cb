"""Evaluation and diagnostics: unbiased accuracy, quadrant-resolved score
histograms, rank-based separation AUC, the denoiser-retention probe, and
CSV/JSON report export."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .datasets import LabeledDataset, QUADRANTS, quadrant_counts, quadrant_masks
from .losses import LossSpec, per_sample_losses
from .nnkit import (
    SgdConfig,
    SgdState,
    init_mlp,
    predict_logits,
    rng_for,
    sgd_train_epoch,
    sgd_train_step,
    softmax_temp,
)
from .pipeline import DenoiserSpec, STREAM_ORDER, PEER_SEED_OFFSET, _margins, coteaching_retention


def unbiased_accuracy(model, test_set: LabeledDataset) -> float:
    """Fraction of argmax predictions equal to the true label."""
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    preds = predict_logits(model, test_set.features).argmax(axis=1)
    return float((preds == test_set.y_true).mean())


@dataclass
class QuadrantHistogram:
    edges: np.ndarray
    counts: dict[str, np.ndarray]
    score_kind: str = ""


def score_histogram_by_quadrant(scores, dataset: LabeledDataset, bins: int,
                                score_kind: str = "") -> QuadrantHistogram:
    """Shared bin edges spanning the score range; one count vector per
    quadrant."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(dataset):
        raise ValueError(f"{len(scores)} scores for {len(dataset)} samples")
    lo, hi = float(scores.min()), float(scores.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = {}
    for name, mask in quadrant_masks(dataset).items():
        counts[name], _ = np.histogram(scores[mask], bins=edges)
    return QuadrantHistogram(edges, counts, score_kind)


def separation_auc(scores, dataset: LabeledDataset, positive_flag: str) -> float:
    """Mann-Whitney rank AUC of scores for the flagged group versus its
    complement; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    if positive_flag == "conflicting":
        positive = ~dataset.aligned_mask
    elif positive_flag == "noisy":
        positive = ~dataset.clean_mask
    else:
        raise ValueError(f"positive_flag must be 'conflicting' or 'noisy', got {positive_flag!r}")
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"both groups must be nonempty (positive={n_pos}, negative={n_neg})")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class RetentionReport:
    initial: dict[str, int]
    remaining: dict[str, int] | None
    weight_quantiles: dict[str, dict] | None
    denoiser: dict
    weight_multiplier: float

    def to_dict(self) -> dict:
        return {
            "initial": self.initial,
            "remaining": self.remaining,
            "weight_quantiles": self.weight_quantiles,
            "denoiser": self.denoiser,
            "weight_multiplier": self.weight_multiplier,
        }

    def rows(self, run_id: str = "run") -> list[tuple]:
        out = []
        for quadrant in QUADRANTS:
            out.append((run_id, "retention", "initial", quadrant, self.initial[quadrant]))
        if self.remaining is not None:
            for quadrant in QUADRANTS:
                out.append((run_id, "retention", "remaining", quadrant, self.remaining[quadrant]))
        if self.weight_quantiles is not None:
            for quadrant, stats in self.weight_quantiles.items():
                for name, value in stats.items():
                    out.append((run_id, "retention", f"effective_weight_{name}", quadrant, value))
        return out


def denoiser_retention(dataset: LabeledDataset, denoiser: DenoiserSpec,
                       weight_multiplier: float = 1.0, sgd: SgdConfig | None = None,
                       epochs: int = 20, seed: int = 0, hidden=(64,)) -> RetentionReport:
    """Train with CE scaled by `weight_multiplier` on bias-conflicting
    samples (a probe that peeks at the hidden flag), then run the denoiser's
    identification and count what survives per quadrant. The gce kind has no
    hard removal and reports effective-weight quantiles instead."""
    if weight_multiplier < 1.0:
        raise ValueError(f"weight_multiplier must be >= 1, got {weight_multiplier}")
    if denoiser.kind == "ce":
        raise ValueError("ce denoiser has no identification step to report")
    sgd = sgd or SgdConfig()
    n = len(dataset)
    weights = np.ones(n)
    weights[~dataset.aligned_mask] = weight_multiplier
    features, labels = dataset.features, dataset.y_given
    order_rng = rng_for(seed, STREAM_ORDER)
    ce_spec = LossSpec("ce")
    ce_fn = ce_spec.loss_grad_fn()
    initial = quadrant_counts(dataset)
    masks = quadrant_masks(dataset)

    if denoiser.kind == "gce":
        gce_fn = LossSpec("gce", q=denoiser.q).loss_grad_fn()
        model = init_mlp(features.shape[1], hidden, dataset.class_count, seed)
        state = SgdState.for_model(model)
        for epoch in range(epochs):
            order = order_rng.permutation(n)
            sgd_train_epoch(model, state, features, labels, sgd.at_epoch(epoch), gce_fn, order,
                            sample_weights=weights)
        probs = softmax_temp(predict_logits(model, features), 1.0)
        effective = probs[np.arange(n), labels] ** denoiser.q
        quantiles = {}
        for name, mask in masks.items():
            vals = effective[mask]
            quantiles[name] = {
                "q10": float(np.percentile(vals, 10)) if mask.any() else float("nan"),
                "q50": float(np.percentile(vals, 50)) if mask.any() else float("nan"),
                "q90": float(np.percentile(vals, 90)) if mask.any() else float("nan"),
                "mean": float(vals.mean()) if mask.any() else float("nan"),
            }
        return RetentionReport(initial, None, quantiles, _denoiser_dict(denoiser), weight_multiplier)

    if denoiser.kind == "aum":
        model = init_mlp(features.shape[1], hidden, dataset.class_count, seed)
        state = SgdState.for_model(model)
        margin_sum = np.zeros(n)
        for epoch in range(epochs):
            order = order_rng.permutation(n)
            sgd_train_epoch(model, state, features, labels, sgd.at_epoch(epoch), ce_fn, order,
                            sample_weights=weights)
            margin_sum += _margins(model, dataset)
        avg_margin = margin_sum / max(epochs, 1)
        retained = avg_margin >= np.percentile(avg_margin, denoiser.percentile)
    else:  # coteaching
        model_a = init_mlp(features.shape[1], hidden, dataset.class_count, seed)
        model_b = init_mlp(features.shape[1], hidden, dataset.class_count, seed + PEER_SEED_OFFSET)
        state_a, state_b = SgdState.for_model(model_a), SgdState.for_model(model_b)
        keep = 1.0
        for epoch in range(epochs):
            keep = coteaching_retention(epoch, denoiser.forget_rate, denoiser.num_gradual)
            epoch_sgd = sgd.at_epoch(epoch)
            order = order_rng.permutation(n)
            for start in range(0, n, sgd.batch_size):
                idx = order[start : start + sgd.batch_size]
                x, y = features[idx], labels[idx]
                k = max(1, int(round(keep * len(idx))))
                losses_a, _ = ce_fn(predict_logits(model_a, x, batch_size=len(x)), y)
                losses_b, _ = ce_fn(predict_logits(model_b, x, batch_size=len(x)), y)
                sel_a = np.argsort(losses_a, kind="stable")[:k]
                sel_b = np.argsort(losses_b, kind="stable")[:k]
                sgd_train_step(model_a, state_a, x[sel_b], y[sel_b], epoch_sgd, ce_fn,
                               sample_weights=weights[idx][sel_b])
                sgd_train_step(model_b, state_b, x[sel_a], y[sel_a], epoch_sgd, ce_fn,
                               sample_weights=weights[idx][sel_a])
        final_losses = per_sample_losses(model_a, dataset, ce_spec)
        k = max(1, int(round(keep * n)))
        retained = np.zeros(n, dtype=bool)
        retained[np.argsort(final_losses, kind="stable")[:k]] = True

    remaining = {name: int((mask & retained).sum()) for name, mask in masks.items()}
    return RetentionReport(initial, remaining, None, _denoiser_dict(denoiser), weight_multiplier)


def _denoiser_dict(denoiser: DenoiserSpec) -> dict:
    from dataclasses import asdict

    return asdict(denoiser)


CSV_COLUMNS = ("run_id", "stage", "metric", "quadrant", "value")


def export_report(report, path, format: str = "json", run_id: str = "run") -> Path:
    """Write a report as JSON (mirror of its dict form) or as a flat CSV with
    columns (run_id, stage, metric, quadrant, value)."""
    path = Path(path)
    if format == "json":
        payload = report.to_dict() if hasattr(report, "to_dict") else report
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path
    if format != "csv":
        raise ValueError(f"format must be 'json' or 'csv', got {format!r}")
    rows = report.rows(run_id) if hasattr(report, "rows") else list(report)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(row)
    return path
