"""Capsule head: feature maps -> capsules -> class vectors -> branch logits.

A branch turns its ``(N, H, W, C)`` feature maps into ``n`` capsules of
dimension ``d`` (see :class:`CapsuleDerivation`), multiplies every capsule
element-wise with one weight vector per class and sums over capsules. The
resulting ``(N, m, d)`` class vectors are batch-normalized and rectified, then
each is summed to a single branch-level logit. Branch logits are combined by a
weighted sum, one scalar weight per branch.
"""

from __future__ import annotations

import enum
from typing import Sequence

import numpy as np

from .autograd import Tensor, capsule_product, mul, reduce_sum, reshape, stack, transpose
from .errors import ConfigError, DimensionError


class CapsuleDerivation(str, enum.Enum):
    """How feature maps are cut into capsules.

    ``XY``: one capsule per feature map, ``n = C`` and ``d = H * W``.
    ``Z``: one capsule per spatial position, ``n = H * W`` and ``d = C``.
    """

    XY = "xy"
    Z = "z"


class MergeMode(str, enum.Enum):
    NOT_LEARNABLE = "not-learnable"
    RANDOM_INIT = "random-init"
    ONES_INIT = "ones-init"

    @property
    def learnable(self):
        return self is not MergeMode.NOT_LEARNABLE


def capsule_shape(fmap_shape, mode) -> tuple[int, int]:
    """``(n, d)`` produced by deriving capsules from ``(H, W, C)`` maps."""
    h, w, c = fmap_shape
    mode = CapsuleDerivation(mode)
    return (c, h * w) if mode is CapsuleDerivation.XY else (h * w, c)


def derive_capsules(fmaps: Tensor, mode) -> Tensor:
    """Reshape ``(N, H, W, C)`` maps into ``(N, n, d)`` capsules.

    XY capsule ``i`` is feature map ``i`` flattened row-major; Z capsule
    ``y * W + x`` is the channel fiber at ``(y, x)``.
    """
    mode = CapsuleDerivation(mode)
    if fmaps.ndim != 4:
        raise DimensionError(f"derive_capsules expects (N, H, W, C) maps, got {fmaps.shape}")
    n, h, w, c = fmaps.shape
    if mode is CapsuleDerivation.Z:
        return reshape(fmaps, (n, h * w, c))
    return reshape(transpose(fmaps, (0, 3, 1, 2)), (n, c, h * w))


def underive_capsules(caps: Tensor, mode, height: int, width: int) -> Tensor:
    """Inverse of :func:`derive_capsules`."""
    mode = CapsuleDerivation(mode)
    n = caps.shape[0]
    if mode is CapsuleDerivation.Z:
        return reshape(caps, (n, height, width, caps.shape[2]))
    c = caps.shape[1]
    return transpose(reshape(caps, (n, c, height, width)), (0, 2, 3, 1))


def init_hvc_weights(n: int, m: int, d: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform in ``[-1/sqrt(d), 1/sqrt(d)]``, shape ``(n, m, d)``."""
    bound = 1.0 / np.sqrt(d)
    return rng.uniform(-bound, bound, size=(n, m, d)).astype(dtype)


def hvc_class_vectors(caps: Tensor, weights: Tensor) -> Tensor:
    """``out[b, c, :] = sum_i caps[b, i, :] * weights[i, c, :]``."""
    return capsule_product(caps, weights)


def branch_logits(class_vectors: Tensor) -> Tensor:
    """Sum each ``(N, m, d)`` class vector down to one logit per class."""
    return reduce_sum(class_vectors, 2)


def init_merge_weights(mode, branches: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    mode = MergeMode(mode)
    if mode is MergeMode.RANDOM_INIT:
        values = rng.uniform(-1.0, 1.0, size=branches)
    else:
        values = np.ones(branches)
    return Tensor(values.astype(dtype), requires_grad=mode.learnable, name="merge.weight")


def merge_branches(logits: Sequence[Tensor], weights: Tensor, expected: int | None = None) -> Tensor:
    """Weighted sum of branch logits: ``sum_b weights[b] * logits[b]``.

    The per-class logits are stacked into length-``B`` vectors, scaled by the
    branch weights and reduced by summation.
    """
    logits = list(logits)
    if expected is not None and len(logits) != expected:
        raise ConfigError(f"merge expects {expected} branches, got {len(logits)}")
    if weights.shape != (len(logits),):
        raise DimensionError(f"merge weights shape {weights.shape} for {len(logits)} branches")
    stacked = stack(logits, axis=-1)  # (N, m, B)
    return reduce_sum(mul(stacked, weights), 2)
