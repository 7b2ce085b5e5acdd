"""Small MNIST-shaped stand-in built from scikit-learn's bundled 8x8 digits.

Each digit is upscaled to a 20x20 box, thresholded so it has clean empty
margins, and placed on a 28x28 canvas with its center of mass at the canvas
center, mirroring how MNIST was normalized. Useful when the real IDX files
are not available (tests, smoke runs).
"""

from __future__ import annotations

import numpy as np

from .augment import _bilinear, shift
from .idx import ImageSet

BOX = 20
SIZE = 28


def _upscale(digit: np.ndarray) -> np.ndarray:
    src = np.linspace(0, digit.shape[0] - 1, BOX)
    rr, cc = np.meshgrid(src, src, indexing="ij")
    up = _bilinear(digit.astype(np.float64), rr, cc) * (255.0 / 16.0)
    up[up < 40] = 0
    return np.clip(np.rint(up), 0, 255).astype(np.uint8)


def _center(box: np.ndarray) -> np.ndarray:
    canvas = np.zeros((SIZE, SIZE), dtype=np.uint8)
    off = (SIZE - BOX) // 2
    canvas[off : off + BOX, off : off + BOX] = box
    mass = canvas.astype(np.float64)
    total = mass.sum()
    if total == 0:
        return canvas
    rows, cols = np.indices(canvas.shape)
    dy = int(round((SIZE - 1) / 2 - (rows * mass).sum() / total))
    dx = int(round((SIZE - 1) / 2 - (cols * mass).sum() / total))
    ink_r = np.flatnonzero(canvas.any(axis=1))
    ink_c = np.flatnonzero(canvas.any(axis=0))
    dy = int(np.clip(dy, -ink_r[0], SIZE - 1 - ink_r[-1]))
    dx = int(np.clip(dx, -ink_c[0], SIZE - 1 - ink_c[-1]))
    return shift(canvas, dx, dy)


def digits_proxy(test_size: int = 497, seed: int = 0) -> tuple[ImageSet, ImageSet]:
    """Return ``(train, test)`` image sets (1300 / 497 images by default)."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = np.stack([_center(_upscale(d)) for d in raw.images])
    labels = raw.target.astype(np.uint8)
    order = np.random.default_rng(seed).permutation(len(labels))
    test, train = order[:test_size], order[test_size:]
    return ImageSet(images[train], labels[train]), ImageSet(images[test], labels[test])
