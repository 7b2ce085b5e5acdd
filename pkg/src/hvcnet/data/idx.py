"""IDX container reader/writer (the MNIST file format).

Header layout, all big-endian: two zero bytes, a type byte (0x08 = u8), the
number of dimensions, then one u32 extent per dimension. Image files are
``0x00000803`` (count, rows, cols); label files ``0x00000801`` (count).
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
ROWS = COLS = 28


@dataclass
class ImageSet:
    images: np.ndarray  # (count, 28, 28) uint8
    labels: np.ndarray  # (count,) uint8

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    @property
    def count(self) -> int:
        return len(self.labels)

    def __len__(self):
        return self.count

    def subset(self, indices) -> "ImageSet":
        return ImageSet(self.images[indices], self.labels[indices])

    def as_float(self, indices=None, dtype=np.float32) -> np.ndarray:
        """Batch of ``(N, 28, 28, 1)`` pixels scaled to ``[0, 1]``."""
        imgs = self.images if indices is None else self.images[indices]
        return (imgs.astype(dtype) / 255.0)[..., None]


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse(buf: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(buf) < 4:
        raise FormatError(f"{what}: file too short for magic number ({len(buf)} bytes)", offset=0)
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise FormatError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    if len(buf) < header:
        raise FormatError(f"{what}: truncated header, expected {header} bytes, got {len(buf)}", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    if ndim == 3 and dims[1:] != (ROWS, COLS):
        raise FormatError(f"{what}: images are {dims[1]}x{dims[2]}, expected {ROWS}x{COLS}", offset=8)
    expected = header + int(np.prod(dims))
    if len(buf) != expected:
        kind = "truncated" if len(buf) < expected else "trailing bytes in"
        raise FormatError(
            f"{what}: {kind} payload, expected length {expected} bytes, actual length {len(buf)}",
            offset=min(len(buf), expected),
        )
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims).copy()


def read_images(path) -> np.ndarray:
    return _parse(_read_bytes(path), IMAGE_MAGIC, 3, f"image file {path}")


def read_labels(path) -> np.ndarray:
    return _parse(_read_bytes(path), LABEL_MAGIC, 1, f"label file {path}")


def load_idx(path_images, path_labels) -> ImageSet:
    """Load a matching pair of IDX image and label files (optionally gzipped)."""
    images = read_images(path_images)
    labels = read_labels(path_labels)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images in {path_images} but {len(labels)} labels in {path_labels}", offset=4)
    return ImageSet(images, labels)


def write_idx(path_images, path_labels, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"images must be (count, rows, cols), got {images.shape}")
    with open(path_images, "wb") as fh:
        fh.write(struct.pack(">4I", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(path_labels, "wb") as fh:
        fh.write(struct.pack(">2I", LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())
