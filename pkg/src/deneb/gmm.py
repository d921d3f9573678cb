"""Two-component 1-D Gaussian mixture fitted by EM over per-sample losses.

Component 0 is canonically the lower-mean ("clean") component; its posterior
responsibility is the clean probability used to carve out the kept subset.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VARIANCE_FLOOR = 1e-8


class DegenerateDataError(ValueError):
    """EM cannot fit: fewer than two distinct values."""


@dataclass
class Gmm1d:
    weights: np.ndarray    # (2,), positive, sums to 1
    means: np.ndarray      # (2,), means[0] <= means[1]
    variances: np.ndarray  # (2,), >= VARIANCE_FLOOR
    log_likelihoods: list[float] = field(default_factory=list)


@dataclass
class SplitResult:
    kept_indices: np.ndarray
    posteriors: np.ndarray
    threshold: float


def _log_normal(values, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (values - mean) ** 2 / var)


def _log_joint(values, gmm_weights, means, variances):
    # (n, 2) log of pi_k * N(v; mu_k, var_k)
    return np.log(gmm_weights)[None, :] + np.column_stack(
        [_log_normal(values, means[k], variances[k]) for k in range(2)]
    )


def fit_em(values, max_iters: int = 100, tol: float = 1e-6) -> Gmm1d:
    """EM from a deterministic min/max initialization; the log-likelihood
    trace is monotone and iteration stops at `tol` on its delta."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2 or not np.isfinite(values).all():
        raise DegenerateDataError(f"need >= 2 finite values, got {values.size}")
    if values.min() == values.max():
        raise DegenerateDataError("all values identical; mixture is degenerate")

    means = np.array([values.min(), values.max()])
    shared_var = max(float(values.var()), VARIANCE_FLOOR)
    variances = np.array([shared_var, shared_var])
    weights = np.array([0.5, 0.5])

    trace: list[float] = []
    for _ in range(max_iters):
        log_joint = _log_joint(values, weights, means, variances)
        row_max = log_joint.max(axis=1, keepdims=True)
        log_norm = row_max[:, 0] + np.log(np.exp(log_joint - row_max).sum(axis=1))
        ll = float(log_norm.sum())
        resp = np.exp(log_joint - log_norm[:, None])

        mass = resp.sum(axis=0)
        weights = mass / values.size
        means = (resp * values[:, None]).sum(axis=0) / mass
        variances = (resp * (values[:, None] - means[None, :]) ** 2).sum(axis=0) / mass
        variances = np.maximum(variances, VARIANCE_FLOOR)

        trace.append(ll)
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < tol:
            break

    if means[0] > means[1]:
        means, variances, weights = means[::-1].copy(), variances[::-1].copy(), weights[::-1].copy()
    return Gmm1d(weights, means, variances, trace)


def posterior_clean(gmm: Gmm1d, value) -> np.ndarray | float:
    """Responsibility of the low-mean component: pi_0 N(v; mu_0, var_0)
    over the mixture density. Scalar in, scalar out."""
    values = np.asarray(value, dtype=np.float64)
    scalar = values.ndim == 0
    log_joint = _log_joint(values.ravel(), gmm.weights, gmm.means, gmm.variances)
    row_max = log_joint.max(axis=1, keepdims=True)
    post = np.exp(log_joint - row_max)
    g = post[:, 0] / post.sum(axis=1)
    return float(g[0]) if scalar else g.reshape(values.shape)


def split_by_threshold(dataset, posteriors, threshold: float) -> SplitResult:
    """Strict-inequality kept set {i : g_i > threshold}, order preserved."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if len(posteriors) != len(dataset):
        raise ValueError(f"{len(posteriors)} posteriors for {len(dataset)} samples")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    kept = np.flatnonzero(posteriors > threshold)
    return SplitResult(kept, posteriors, float(threshold))
