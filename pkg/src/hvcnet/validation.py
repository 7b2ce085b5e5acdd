"""Input checks shared by the estimator API and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from .errors import DimensionError

SIDE = 28


def check_images(X, name: str = "X") -> np.ndarray:
    """Return ``X`` as a uint8 ``(N, 28, 28)`` array.

    Accepts ``(N, 784)``, ``(N, 28, 28)`` or ``(N, 28, 28, 1)``. Integer input
    is taken as 0..255 pixel values; float input as intensities in [0, 1].
    """
    X = np.asarray(X)
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim == 2 and X.shape[1] == SIDE * SIDE:
        X = X.reshape(-1, SIDE, SIDE)
    if X.ndim != 3 or X.shape[1:] != (SIDE, SIDE):
        raise DimensionError(f"{name} must have shape (N, 784), (N, 28, 28) or (N, 28, 28, 1), got {X.shape}")
    flat = check_array(X.reshape(len(X), -1), dtype=None, ensure_min_samples=1, input_name=name)
    if np.issubdtype(flat.dtype, np.floating):
        if flat.size and (flat.min() < 0.0 or flat.max() > 1.0):
            raise ValueError(f"float {name} must hold intensities in [0, 1]")
        flat = np.rint(flat * 255.0)
    elif flat.size and (flat.min() < 0 or flat.max() > 255):
        raise ValueError(f"integer {name} must hold pixel values in [0, 255]")
    return flat.astype(np.uint8).reshape(-1, SIDE, SIDE)


def check_labels(y, n_samples: int, class_count: int = 10) -> np.ndarray:
    """Return ``y`` as uint8 class indices in ``[0, class_count)``."""
    y = column_or_1d(y, warn=True)
    if len(y) != n_samples:
        raise ValueError(f"got {len(y)} labels for {n_samples} samples")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integer class indices")
        y = y.astype(np.int64)
    bad = np.flatnonzero((y < 0) | (y >= class_count))
    if bad.size:
        raise ValueError(f"label {y[bad[0]]} at sample {bad[0]} outside [0, {class_count})")
    return y.astype(np.uint8)
