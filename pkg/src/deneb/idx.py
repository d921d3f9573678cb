"""Reader/writer for the MNIST IDX binary format.

Images: big-endian magic 0x00000803, then u32 count/rows/cols, then raw
uint8 pixels. Labels: magic 0x00000801, u32 count, raw uint8 labels.
Gzipped files are detected by their two-byte signature and inflated
transparently.
"""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    """Malformed IDX payload; `offset` points at the offending byte."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


def _read_bytes(source) -> bytes:
    data = Path(source).read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return data


def _read_u32(data: bytes, offset: int, what: str) -> int:
    if len(data) < offset + 4:
        raise IdxError(f"truncated while reading {what}", offset=len(data))
    return struct.unpack_from(">I", data, offset)[0]


def read_idx_images(source) -> np.ndarray:
    """Parse an IDX image file into a (count, rows, cols) uint8 array."""
    data = _read_bytes(source)
    magic = _read_u32(data, 0, "magic")
    if magic != IMAGE_MAGIC:
        raise IdxError(f"bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}", offset=0)
    count = _read_u32(data, 4, "image count")
    rows = _read_u32(data, 8, "row count")
    cols = _read_u32(data, 12, "column count")
    expected = 16 + count * rows * cols
    if len(data) < expected:
        raise IdxError(
            f"image payload truncated: need {expected} bytes, have {len(data)}", offset=len(data)
        )
    pixels = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows, cols).copy()


def read_idx_labels(source) -> np.ndarray:
    """Parse an IDX label file into a (count,) uint8 array."""
    data = _read_bytes(source)
    magic = _read_u32(data, 0, "magic")
    if magic != LABEL_MAGIC:
        raise IdxError(f"bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}", offset=0)
    count = _read_u32(data, 4, "label count")
    if len(data) < 8 + count:
        raise IdxError(f"label payload truncated: need {8 + count} bytes, have {len(data)}", offset=len(data))
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=8).copy()


def write_idx_images(path, images: np.ndarray) -> Path:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"expected (count, rows, cols) array, got shape {images.shape}")
    n, rows, cols = images.shape
    path = Path(path)
    path.write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    return path


def write_idx_labels(path, labels: np.ndarray) -> Path:
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ValueError(f"expected 1-d label array, got shape {labels.shape}")
    path = Path(path)
    path.write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())
    return path
