"""Robust training for datasets that are simultaneously biased and
label-noisy: train a prejudice model, score samples by label-free entropy,
and denoise on entropy-resampled mini-batches."""

from .datasets import (
    ColorTable,
    LabeledDataset,
    Sample,
    flip_labels,
    inject_color_bias,
    load_container,
    load_idx,
    make_toy_biased,
    make_unbiased_test,
    quadrant_counts,
    save_container,
    split_train_val,
    subset,
)
from .gmm import Gmm1d, SplitResult, fit_em, posterior_clean, split_by_threshold
from .losses import LossSpec, PerSampleLossTable, ce_loss, gce_loss, per_sample_losses, sce_loss
from .nnkit import MlpModel, SgdConfig,forward, init_mlp, load_model, save_model, sgd_step, softmax_temp
from .pipeline import (
    DenebConfig,
    DenoiserSpec,
    EntropyTable,
    RunReport,
    SamplingDistribution,
    entropy_margin,
    entropy_scores,
    run_deneb,
    sample_batch,
    sampling_distribution,
    train_prejudice_gce,
    train_prejudice_gmm,
    train_robust,
)
from .baselines import (
    JttConfig,
    LffConfig,
    jtt_error_set,
    relative_difficulty_weight,
    train_jtt,
    train_lff,
    train_vanilla,
)
from .analysis import (
    QuadrantHistogram,
    RetentionReport,
    denoiser_retention,
    export_report,
    score_histogram_by_quadrant,
    separation_auc,
    unbiased_accuracy,
)

__version__ = "0.1.0"
