"""Reader for the MNIST IDX files (optionally gzip-compressed)."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_header(f, expected_magic: int, n_dims: int) -> tuple[int, ...]:
    raw = f.read(4)
    if len(raw) != 4:
        raise ValueError("truncated IDX header")
    (magic,) = struct.unpack(">I", raw)
    if magic != expected_magic:
        raise ValueError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    raw = f.read(4 * n_dims)
    if len(raw) != 4 * n_dims:
        raise ValueError("truncated IDX header")
    return struct.unpack(">" + "I" * n_dims, raw)


def read_images(path) -> np.ndarray:
    """Images as an ``(n, rows * cols)`` float64 array scaled to [0, 1]."""
    with _open(path) as f:
        n, rows, cols = _read_header(f, IMAGE_MAGIC, 3)
        buf = f.read(n * rows * cols)
    if len(buf) != n * rows * cols:
        raise ValueError(f"image file holds {len(buf)} pixel bytes, header promises {n * rows * cols}")
    pixels = np.frombuffer(buf, dtype=np.uint8).reshape(n, rows * cols)
    return pixels.astype(np.float64) / 255.0


def read_labels(path) -> np.ndarray:
    with _open(path) as f:
        (n,) = _read_header(f, LABEL_MAGIC, 1)
        buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"label file holds {len(buf)} labels, header promises {n}")
    return np.frombuffer(buf, dtype=np.uint8).astype(np.int64)


def load(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    x = read_images(images_path)
    y = read_labels(labels_path)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"{x.shape[0]} images but {y.shape[0]} labels")
    return x, y


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (used for fixtures and exports)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = IMAGE_MAGIC if arr.ndim == 3 else LABEL_MAGIC
    if arr.ndim not in (1, 3):
        raise ValueError("only label (1-D) and image (3-D) arrays are supported")
    header = struct.pack(">" + "I" * (1 + arr.ndim), magic, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())
