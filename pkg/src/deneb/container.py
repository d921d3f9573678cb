"""DNEBDS01 binary container: named arrays + JSON metadata, CRC-checked.

Layout: 8-byte magic ``DNEBDS01`` | u32-LE header length | UTF-8 JSON header
| raw little-endian array payload | u32-LE CRC32 trailer over all preceding
bytes. The header carries ``meta`` (free-form JSON) and ``arrays``, a list of
``{name, dtype, shape, offset, nbytes}`` with offsets relative to the payload
start. Allowed dtypes: ``<f4``, ``<f8``, ``<i4``.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"DNEBDS01"
_ALLOWED_DTYPES = ("<f4", "<f8", "<i4")


class ContainerError(ValueError):
    """Malformed container; `offset` points at the offending byte."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


def _canonical_dtype(arr: np.ndarray) -> str:
    if arr.dtype == np.dtype("<f4"):
        return "<f4"
    if arr.dtype == np.dtype("<f8"):
        return "<f8"
    if arr.dtype.kind in "iu" and arr.dtype.itemsize <= 4:
        return "<i4"
    raise ContainerError(f"unsupported array dtype {arr.dtype!r}")


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write named arrays and metadata; byte output is a pure function of the inputs."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = _canonical_dtype(arr)
        data = arr.astype(dtype, copy=False).tobytes()
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        )
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    blob = MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    path = Path(path)
    path.write_bytes(blob + struct.pack("<I", crc))
    return path


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Load arrays and metadata, verifying magic, structure, and CRC32."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC):
        raise ContainerError("file truncated before magic", offset=0)
    if raw[: len(MAGIC)] != MAGIC:
        if raw[:6] == MAGIC[:6]:
            raise ContainerError(
                f"container version {raw[6:8]!r} not supported (expected {MAGIC[6:8]!r})", offset=6
            )
        raise ContainerError(f"bad magic {raw[:8]!r}", offset=0)
    if len(raw) < 12:
        raise ContainerError("file truncated in header length", offset=8)
    (header_len,) = struct.unpack_from("<I", raw, 8)
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise ContainerError("file truncated in header", offset=len(raw))
    if len(raw) < header_end + 4:
        raise ContainerError("file truncated before CRC trailer", offset=len(raw))
    (stored_crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ContainerError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            offset=len(raw) - 4,
        )
    try:
        header = json.loads(raw[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"header is not valid JSON: {exc}", offset=12) from exc
    payload = raw[header_end:-4]
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise ContainerError(f"array {entry['name']!r} declares dtype {dtype!r}", offset=12)
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ContainerError(
                f"array {entry['name']!r} extends past payload end", offset=header_end + start
            )
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // np.dtype(dtype).itemsize, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header.get("meta", {})
