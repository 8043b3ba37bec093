"""Binary tensor format and sample-file helpers.

Tensor container layout, little-endian throughout:

    bytes 0-3   magic "MQNT"
    bytes 4-7   format version (u32)
    bytes 8-15  rows (u64)
    bytes 16-23 cols (u64)
    then        rows*cols float64 payload, row-major

A calibration sample file is one tensor container followed by exactly
`rows` modality bytes, 0 for a text token row and 1 for a visual token row.
"""

from __future__ import annotations

import base64
import struct
from pathlib import Path

import numpy as np

from .numerics import as_tensor, check_finite

MAGIC = b"MQNT"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIQQ")

MODALITY_TEXT = 0
MODALITY_VISUAL = 1


def tensor_to_bytes(a: np.ndarray) -> bytes:
    a = check_finite(as_tensor(a), "tensor payload")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, a.shape[0], a.shape[1])
    return header + a.astype("<f8").tobytes(order="C")


def tensor_from_bytes(raw: bytes) -> tuple[np.ndarray, int]:
    """Decode one tensor container, returning (tensor, bytes consumed)."""
    if len(raw) < _HEADER.size:
        raise ValueError(f"tensor container truncated: {len(raw)} bytes")
    magic, version, rows, cols = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    need = _HEADER.size + rows * cols * 8
    if len(raw) < need:
        raise ValueError(f"tensor payload truncated: have {len(raw)} bytes, need {need}")
    data = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=_HEADER.size)
    a = np.ascontiguousarray(data.reshape(rows, cols).astype(np.float64))
    return check_finite(a, "tensor payload"), need


def save_tensor(path, a: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(a))


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    a, used = tensor_from_bytes(raw)
    if used != len(raw):
        raise ValueError(f"{path}: {len(raw) - used} trailing bytes after tensor")
    return a


def tensor_to_b64(a: np.ndarray) -> str:
    """Tensor container as base64 text, for embedding in JSON files."""
    return base64.b64encode(tensor_to_bytes(a)).decode("ascii")


def tensor_from_b64(text: str) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    a, used = tensor_from_bytes(raw)
    if used != len(raw):
        raise ValueError("embedded tensor has trailing bytes")
    return a


def save_sample(path, tensor: np.ndarray, modality: list[int] | np.ndarray) -> None:
    """Write one calibration sample: tensor container + per-row modality bytes."""
    tensor = as_tensor(tensor)
    mod = np.asarray(modality, dtype=np.int64).reshape(-1)
    if mod.shape[0] != tensor.shape[0]:
        raise ValueError(
            f"modality length {mod.shape[0]} != token count {tensor.shape[0]}"
        )
    if not np.isin(mod, (MODALITY_TEXT, MODALITY_VISUAL)).all():
        raise ValueError("modality bytes must be 0 (text) or 1 (visual)")
    Path(path).write_bytes(tensor_to_bytes(tensor) + bytes(mod.tolist()))


def load_sample(path) -> tuple[np.ndarray, np.ndarray]:
    """Read one calibration sample, returning (tensor, modality byte array)."""
    raw = Path(path).read_bytes()
    tensor, used = tensor_from_bytes(raw)
    tail = raw[used:]
    if len(tail) != tensor.shape[0]:
        raise ValueError(
            f"{path}: expected {tensor.shape[0]} modality bytes, found {len(tail)}"
        )
    mod = np.frombuffer(tail, dtype=np.uint8).astype(np.int64)
    if not np.isin(mod, (MODALITY_TEXT, MODALITY_VISUAL)).all():
        raise ValueError(f"{path}: modality bytes must be 0 or 1")
    return tensor, mod


def save_samples(path, samples) -> None:
    """Write a batch of samples: u64 count, then each sample record.

    A record is one tensor container followed by its per-row modality
    bytes, the same layout save_sample uses for a single file.
    """
    chunks = [struct.pack("<Q", len(samples))]
    for tensor, modality in samples:
        tensor = as_tensor(tensor)
        mod = np.asarray(modality, dtype=np.int64).reshape(-1)
        if mod.shape[0] != tensor.shape[0]:
            raise ValueError(
                f"modality length {mod.shape[0]} != token count {tensor.shape[0]}"
            )
        if not np.isin(mod, (MODALITY_TEXT, MODALITY_VISUAL)).all():
            raise ValueError("modality bytes must be 0 (text) or 1 (visual)")
        chunks.append(tensor_to_bytes(tensor) + bytes(mod.tolist()))
    Path(path).write_bytes(b"".join(chunks))


def load_samples(path) -> list[tuple[np.ndarray, np.ndarray]]:
    """Read a batch of samples written by save_samples."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: sample batch truncated")
    (count,) = struct.unpack_from("<Q", raw, 0)
    offset = 8
    samples = []
    for i in range(count):
        tensor, used = tensor_from_bytes(raw[offset:])
        offset += used
        tail = raw[offset : offset + tensor.shape[0]]
        if len(tail) != tensor.shape[0]:
            raise ValueError(f"{path}: sample {i} modality bytes truncated")
        mod = np.frombuffer(tail, dtype=np.uint8).astype(np.int64)
        if not np.isin(mod, (MODALITY_TEXT, MODALITY_VISUAL)).all():
            raise ValueError(f"{path}: sample {i} modality bytes must be 0 or 1")
        offset += tensor.shape[0]
        samples.append((tensor, mod))
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after samples")
    return samples
