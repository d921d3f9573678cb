"""Deterministic synthetic digit images in MNIST geometry (28x28 grayscale).

Glyphs are seven-segment renderings of 0-9 with per-sample jitter (stroke
thickness, rotation, scale, shift, intensity, foreground speckle), written
out as standard IDX files so they are drop-in stand-ins for MNIST when the
real files are unavailable. Shape is learnable but markedly slower to learn
than a planted color cue, which is what the bias experiments need.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .idx import write_idx_images, write_idx_labels

# Segment letters: A top, B top-right, C bottom-right, D bottom, E bottom-left,
# F top-left, G middle.
DIGIT_SEGMENTS = {
    0: "ABCDEF",
    1: "BC",
    2: "ABDEG",
    3: "ABCDG",
    4: "BCFG",
    5: "ACDFG",
    6: "ACDEFG",
    7: "ABC",
    8: "ABCDEFG",
    9: "ABCDFG",
}

_X0, _X1 = 9, 19
_Y0, _Y1 = 5, 23
_YM = (_Y0 + _Y1) // 2

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


def _segment_boxes(t: int):
    return {
        "A": (_Y0, _Y0 + t, _X0, _X1),
        "B": (_Y0, _YM, _X1 - t, _X1),
        "C": (_YM, _Y1, _X1 - t, _X1),
        "D": (_Y1 - t, _Y1, _X0, _X1),
        "E": (_YM, _Y1, _X0, _X0 + t),
        "F": (_Y0, _YM, _X0, _X0 + t),
        "G": (_YM - t // 2 - 1, _YM - t // 2 - 1 + t, _X0, _X1),
    }


def render_digit(digit: int, rng: np.random.Generator) -> np.ndarray:
    """One jittered 28x28 float32 glyph in [0, 1]."""
    thickness = int(rng.integers(2, 4))
    canvas = np.zeros((28, 28), dtype=np.float64)
    boxes = _segment_boxes(thickness)
    for seg in DIGIT_SEGMENTS[digit]:
        r0, r1, c0, c1 = boxes[seg]
        canvas[r0:r1, c0:c1] = 1.0

    angle = rng.uniform(-9.0, 9.0) * np.pi / 180.0
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-2.0, 2.0, size=2)
    cos_a, sin_a = np.cos(angle) / scale, np.sin(angle) / scale
    matrix = np.array([[cos_a, -sin_a], [sin_a, cos_a]])
    center = np.array([13.5, 13.5])
    offset = center - matrix @ (center + shift)
    warped = ndimage.affine_transform(canvas, matrix, offset=offset, order=1, mode="constant", cval=0.0)

    intensity = rng.uniform(0.78, 1.0)
    speckle = rng.uniform(0.82, 1.18, size=warped.shape)
    out = np.clip(warped * intensity * speckle, 0.0, 1.0)
    # drop interpolation dust so the background stays exactly zero
    out[out < 0.05] = 0.0
    return out.astype(np.float32)


def make_digit_arrays(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """n uint8 images plus labels, classes drawn uniformly."""
    rng = np.random.default_rng([seed, 0x5E6])
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = np.empty((n, 28, 28), dtype=np.uint8)
    for i, digit in enumerate(labels):
        images[i] = np.round(render_digit(int(digit), rng) * 255.0).astype(np.uint8)
    return images, labels


def write_digit_source(directory, n_train: int, n_test: int, seed: int) -> dict[str, Path]:
    """Write train/test IDX files under `directory`; reuses files already present."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_images": directory / TRAIN_IMAGES,
        "train_labels": directory / TRAIN_LABELS,
        "test_images": directory / TEST_IMAGES,
        "test_labels": directory / TEST_LABELS,
    }
    if not all(p.exists() for p in paths.values()):
        train_images, train_labels = make_digit_arrays(n_train, seed)
        test_images, test_labels = make_digit_arrays(n_test, seed + 1)
        write_idx_images(paths["train_images"], train_images)
        write_idx_labels(paths["train_labels"], train_labels)
        write_idx_images(paths["test_images"], test_images)
        write_idx_labels(paths["test_labels"], test_labels)
    return paths
