"""Biased + label-noisy dataset construction and persistence.

Builds color-biased digit datasets (per-class color with Gaussian jitter,
multiplicative foreground coloring), applies symmetric label flipping, keeps
the (aligned x clean) quadrant bookkeeping re-derivable from raw fields, and
round-trips everything through the DNEBDS01 container.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .container import read_container, write_container
from .idx import read_idx_images, read_idx_labels

QUADRANTS = ("aligned_clean", "aligned_noisy", "conflicting_clean", "conflicting_noisy")

# Per-class RGB used for the colored digit benchmark.
CMNIST_RGB = np.array(
    [
        [0.8627451, 0.07843137, 0.23529412],
        [0.0, 0.50196078, 0.50196078],
        [0.99215686, 0.91372549, 0.0627451],
        [0.0, 0.58431373, 0.71372549],
        [0.929411765, 0.568627451, 0.129411765],
        [0.568627451, 0.117647059, 0.737254902],
        [0.274509804, 0.941176471, 0.941176471],
        [0.980392157, 0.77254902, 0.733333333],
        [0.823529412, 0.960784314, 0.235294118],
        [0.501960784, 0.0, 0.0],
    ],
    dtype=np.float64,
)


@dataclass
class ColorTable:
    rgb: np.ndarray  # (C, 3) in [0, 1]
    jitter_sigma: float = 0.01

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 2 or self.rgb.shape[1] != 3:
            raise ValueError(f"expected (C, 3) color table, got {self.rgb.shape}")
        if (self.rgb < 0).any() or (self.rgb > 1).any():
            raise ValueError("color channels must lie in [0, 1]")

    @classmethod
    def default(cls, class_count: int = 10, jitter_sigma: float = 0.01) -> "ColorTable":
        if class_count > len(CMNIST_RGB):
            raise ValueError(f"built-in table has {len(CMNIST_RGB)} colors, asked for {class_count}")
        return cls(CMNIST_RGB[:class_count].copy(), jitter_sigma)


@dataclass
class Sample:
    features: np.ndarray
    y_true: int
    y_given: int
    bias_index: int

    @property
    def aligned(self) -> bool:
        return self.bias_index == self.y_true

    @property
    def clean(self) -> bool:
        return self.y_given == self.y_true


@dataclass
class LabeledDataset:
    features: np.ndarray    # (N, D) float32
    y_true: np.ndarray      # (N,) int32
    y_given: np.ndarray     # (N,) int32
    bias_index: np.ndarray  # (N,) int32; -1 where no bias attribute exists
    class_count: int
    alpha: float            # realized conflict ratio
    eta: float              # requested flip rate
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.y_true = np.ascontiguousarray(self.y_true, dtype=np.int32)
        self.y_given = np.ascontiguousarray(self.y_given, dtype=np.int32)
        self.bias_index = np.ascontiguousarray(self.bias_index, dtype=np.int32)
        n = len(self.features)
        if not (len(self.y_true) == len(self.y_given) == len(self.bias_index) == n):
            raise ValueError("feature/label array lengths disagree")
        for name, arr in (("y_true", self.y_true), ("y_given", self.y_given)):
            if n and ((arr < 0).any() or (arr >= self.class_count).any()):
                raise ValueError(f"{name} outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.y_true[i]), int(self.y_given[i]), int(self.bias_index[i]))

    @property
    def aligned_mask(self) -> np.ndarray:
        return self.bias_index == self.y_true

    @property
    def clean_mask(self) -> np.ndarray:
        return self.y_given == self.y_true

    @property
    def has_bias_attribute(self) -> bool:
        return bool((self.bias_index >= 0).all()) and len(self) > 0


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def load_idx(images_source, labels_source) -> LabeledDataset:
    """Grayscale dataset from an IDX image/label file pair; pixels scaled
    by 1/255, given labels start equal to true labels, no bias attribute."""
    images = read_idx_images(images_source)
    labels = read_idx_labels(labels_source)
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    n = len(images)
    features = (images.reshape(n, -1).astype(np.float32)) / np.float32(255.0)
    class_count = max(10, int(labels.max()) + 1) if n else 10
    return LabeledDataset(
        features=features,
        y_true=labels.astype(np.int32),
        y_given=labels.astype(np.int32),
        bias_index=np.full(n, -1, dtype=np.int32),
        class_count=class_count,
        alpha=0.0,
        eta=0.0,
        provenance={"source": "idx", "images": str(images_source), "labels": str(labels_source)},
    )


def inject_color_bias(dataset: LabeledDataset, alpha: float, colors: ColorTable | None = None,
                      rng_seed: int = 0) -> LabeledDataset:
    """Color the grayscale features: per class, exactly round(alpha*N_class)
    samples get a uniformly chosen wrong-class color (conflicting), the rest
    their own class color. RGB = intensity x clip(color + jitter, 0, 1) per
    channel, channel-major layout."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if dataset.has_bias_attribute:
        raise ValueError("dataset already carries a bias attribute")
    colors = colors or ColorTable.default(dataset.class_count)
    if len(colors.rgb) != dataset.class_count:
        raise ValueError(f"{len(colors.rgb)} colors for {dataset.class_count} classes")

    rng = np.random.default_rng([rng_seed, 0xC0108])
    n = len(dataset)
    c = dataset.class_count
    bias_index = dataset.y_true.astype(np.int32).copy()
    for cls in range(c):
        members = np.flatnonzero(dataset.y_true == cls)
        k = _round_half_up(alpha * len(members))
        chosen = rng.permutation(members)[:k]
        # uniformly among the other classes
        offsets = rng.integers(1, c, size=k)
        bias_index[chosen] = (cls + offsets) % c

    jitter = rng.normal(0.0, colors.jitter_sigma, size=(n, 3))
    sample_rgb = np.clip(colors.rgb[bias_index] + jitter, 0.0, 1.0)
    intensity = dataset.features.astype(np.float64)
    features = (sample_rgb[:, :, None] * intensity[:, None, :]).reshape(n, -1).astype(np.float32)

    realized = float((bias_index != dataset.y_true).sum() / n) if n else 0.0
    prov = dict(dataset.provenance)
    prov.update({"alpha": alpha, "bias_seed": rng_seed, "jitter_sigma": colors.jitter_sigma})
    return LabeledDataset(features, dataset.y_true, dataset.y_given, bias_index,
                          c, realized, dataset.eta, prov)


def flip_labels(dataset: LabeledDataset, eta: float, rng_seed: int = 0) -> LabeledDataset:
    """Symmetric label noise: each sample selected with probability eta gets
    a given label drawn uniformly from all classes (the draw may equal the
    true label)."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    rng = np.random.default_rng([rng_seed, 0xF11B])
    n = len(dataset)
    selected = rng.random(n) < eta
    y_given = dataset.y_true.copy()
    y_given[selected] = rng.integers(0, dataset.class_count, size=int(selected.sum()), dtype=np.int32)
    prov = dict(dataset.provenance)
    prov.update({"eta": eta, "flip_seed": rng_seed})
    return LabeledDataset(dataset.features, dataset.y_true, y_given, dataset.bias_index,
                          dataset.class_count, dataset.alpha, eta, prov)


def make_unbiased_test(dataset: LabeledDataset, colors: ColorTable | None = None,
                       rng_seed: int = 0) -> LabeledDataset:
    """Colored test set with the bias attribute drawn uniformly per sample
    and no label noise, so color carries no class information."""
    if dataset.has_bias_attribute:
        raise ValueError("expected a grayscale test set")
    colors = colors or ColorTable.default(dataset.class_count)
    rng = np.random.default_rng([rng_seed, 0x7E57])
    n = len(dataset)
    bias_index = rng.integers(0, dataset.class_count, size=n, dtype=np.int32)
    jitter = rng.normal(0.0, colors.jitter_sigma, size=(n, 3))
    sample_rgb = np.clip(colors.rgb[bias_index] + jitter, 0.0, 1.0)
    intensity = dataset.features.astype(np.float64)
    features = (sample_rgb[:, :, None] * intensity[:, None, :]).reshape(n, -1).astype(np.float32)
    realized = float((bias_index != dataset.y_true).sum() / n) if n else 0.0
    prov = dict(dataset.provenance)
    prov.update({"unbiased_test": True, "color_seed": rng_seed})
    return LabeledDataset(features, dataset.y_true, dataset.y_true.copy(), bias_index,
                          dataset.class_count, realized, 0.0, prov)


def make_toy_biased(n: int, alpha: float, eta: float, rng_seed: int = 0) -> LabeledDataset:
    """Fast 2-class, 2-feature fixture. Feature 0 is a weak target signal;
    feature 1 is a strong signal tied to the bias attribute, so it agrees
    with the true label exactly on aligned samples."""
    if n < 4:
        raise ValueError(f"need n >= 4 to populate all quadrants, got {n}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    rng = np.random.default_rng([rng_seed, 0x70F])
    y_true = rng.integers(0, 2, size=n, dtype=np.int32)
    bias_index = y_true.copy()
    for cls in range(2):
        members = np.flatnonzero(y_true == cls)
        k = _round_half_up(alpha * len(members))
        chosen = rng.permutation(members)[:k]
        bias_index[chosen] = 1 - cls

    weak = (2.0 * y_true - 1.0) + rng.normal(0.0, 0.5, size=n)
    strong = (2.0 * bias_index - 1.0) + rng.normal(0.0, 0.1, size=n)
    features = np.column_stack([weak, strong]).astype(np.float32)
    realized = float((bias_index != y_true).sum() / n)
    base = LabeledDataset(
        features, y_true, y_true.copy(), bias_index, 2, realized, 0.0,
        {"source": "toy", "n": n, "alpha": alpha, "eta": eta, "seed": rng_seed},
    )
    return flip_labels(base, eta, rng_seed) if eta > 0 else base


def quadrant_counts(dataset: LabeledDataset) -> dict[str, int]:
    aligned = dataset.aligned_mask
    clean = dataset.clean_mask
    return {
        "aligned_clean": int((aligned & clean).sum()),
        "aligned_noisy": int((aligned & ~clean).sum()),
        "conflicting_clean": int((~aligned & clean).sum()),
        "conflicting_noisy": int((~aligned & ~clean).sum()),
    }


def quadrant_masks(dataset: LabeledDataset) -> dict[str, np.ndarray]:
    aligned = dataset.aligned_mask
    clean = dataset.clean_mask
    return {
        "aligned_clean": aligned & clean,
        "aligned_noisy": aligned & ~clean,
        "conflicting_clean": ~aligned & clean,
        "conflicting_noisy": ~aligned & ~clean,
    }


def subset(dataset: LabeledDataset, indices) -> LabeledDataset:
    indices = np.asarray(indices)
    bias = dataset.bias_index[indices]
    y = dataset.y_true[indices]
    realized = float((bias != y).sum() / len(indices)) if len(indices) else 0.0
    return LabeledDataset(
        dataset.features[indices], y, dataset.y_given[indices], bias,
        dataset.class_count, realized, dataset.eta, dict(dataset.provenance),
    )


def split_train_val(dataset: LabeledDataset, val_fraction: float = 0.1,
                    rng_seed: int = 0) -> tuple[LabeledDataset, LabeledDataset]:
    """Shuffled split applied after bias/noise injection, so the validation
    half is itself biased and noisy."""
    rng = np.random.default_rng([rng_seed, 0x59117])
    order = rng.permutation(len(dataset))
    n_val = int(round(val_fraction * len(dataset)))
    val, train = subset(dataset, np.sort(order[:n_val])), subset(dataset, np.sort(order[n_val:]))
    train.provenance["split"] = "train"
    val.provenance["split"] = "val"
    return train, val


def save_container(dataset: LabeledDataset, path):
    """Persist to a DNEBDS01 file; the round-trip is bit-exact."""
    meta = {
        "kind": "labeled-dataset",
        "class_count": dataset.class_count,
        "alpha": dataset.alpha,
        "eta": dataset.eta,
        "provenance": dataset.provenance,
    }
    arrays = {
        "features": dataset.features,
        "y_true": dataset.y_true,
        "y_given": dataset.y_given,
        "bias_index": dataset.bias_index,
    }
    return write_container(path, arrays, meta)


def load_container(path) -> LabeledDataset:
    arrays, meta = read_container(path)
    if meta.get("kind") != "labeled-dataset":
        raise ValueError(f"{path}: not a dataset container (kind={meta.get('kind')!r})")
    return LabeledDataset(
        arrays["features"], arrays["y_true"], arrays["y_given"], arrays["bias_index"],
        int(meta["class_count"]), float(meta["alpha"]), float(meta["eta"]),
        meta.get("provenance", {}),
    )
