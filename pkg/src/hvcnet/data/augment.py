"""Label-preserving augmentation for 28x28 digit images.

Four steps run in a fixed order: rotation, translation within the image's own
empty margins, width squeeze about the ink center, and erasure of a 4x4 patch
inside the central 20x20 region. Every step takes its own keyed random
stream, so the output for ``(seed, epoch, image index)`` never depends on how
the work is scheduled.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .. import rng as rngmod
from ..errors import ConfigError

SIZE = 28


@dataclass(frozen=True)
class Margins:
    """Empty columns/rows flanking the ink; 28 on every side for a blank image."""

    left: int
    right: int
    top: int
    bottom: int

    @property
    def degenerate(self) -> bool:
        return self.left == SIZE


def compute_margins(image: np.ndarray) -> Margins:
    ink = np.asarray(image) != 0
    cols = np.flatnonzero(ink.any(axis=0))
    rows = np.flatnonzero(ink.any(axis=1))
    if cols.size == 0:
        return Margins(SIZE, SIZE, SIZE, SIZE)
    h, w = ink.shape
    return Margins(int(cols[0]), int(w - 1 - cols[-1]), int(rows[0]), int(h - 1 - rows[-1]))


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def _bilinear(image: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    """Sample ``image`` at fractional positions, reading zero outside the canvas."""
    h, w = image.shape
    padded = np.zeros((h + 2, w + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = image
    r = np.clip(src_r + 1, 0, h + 1)
    c = np.clip(src_c + 1, 0, w + 1)
    r0 = np.minimum(np.floor(r).astype(np.intp), h)
    c0 = np.minimum(np.floor(c).astype(np.intp), w)
    fr = r - r0
    fc = c - c0
    top = padded[r0, c0] * (1 - fc) + padded[r0, c0 + 1] * fc
    bottom = padded[r0 + 1, c0] * (1 - fc) + padded[r0 + 1, c0 + 1] * fc
    return top * (1 - fr) + bottom * fr


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the canvas center (bilinear, zero fill)."""
    image = np.asarray(image)
    h, w = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rr - cy, cc - cx
    # inverse map: output pixel -> source position
    src_c = cos * dx - sin * dy + cx
    src_r = sin * dx + cos * dy + cy
    return _to_u8(_bilinear(image.astype(np.float64), src_r, src_c))


def shift(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate by whole pixels (positive dx = right, dy = down); vacated pixels are 0."""
    image = np.asarray(image)
    h, w = image.shape
    out = np.zeros_like(image)
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src = image[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
    out[max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
    return out


def translate_offsets(margins: Margins, rng: np.random.Generator, cap: Optional[int] = None) -> tuple[int, int]:
    """Draw ``(dx, dy)`` inside the margins.

    Per axis a fair coin picks the direction and the magnitude is uniform over
    ``0..margin`` in that direction, clipped to ``cap`` when given.
    """
    right = rng.random() < 0.5
    limit = margins.right if right else margins.left
    dx = int(rng.integers(0, limit + 1))
    down = rng.random() < 0.5
    limit = margins.bottom if down else margins.top
    dy = int(rng.integers(0, limit + 1))
    if cap is not None:
        dx, dy = min(dx, cap), min(dy, cap)
    return (dx if right else -dx), (dy if down else -dy)


def squeeze_width(image: np.ndarray, factor: float) -> np.ndarray:
    """Compress the ink horizontally by ``factor`` keeping its center column.

    The ink bounding box of width ``w`` is resampled to ``round(w * factor)``
    columns and padded equally on both sides.
    """
    image = np.asarray(image)
    cols = np.flatnonzero((image != 0).any(axis=0))
    if cols.size == 0:
        return image.copy()
    c0, c1 = int(cols[0]), int(cols[-1])
    w = c1 - c0 + 1
    target = max(1, int(np.floor(w * factor + 0.5)))
    if target >= w:
        return image.copy()
    if target == 1:
        src = np.array([(c0 + c1) / 2.0])
    else:
        src = c0 + np.arange(target) * (w - 1) / (target - 1)
    h = image.shape[0]
    src_c = np.broadcast_to(src, (h, target))
    src_r = np.broadcast_to(np.arange(h, dtype=np.float64)[:, None], (h, target))
    band = _bilinear(image.astype(np.float64), src_r, src_c)
    out = np.zeros_like(image)
    start = c0 + (w - target) // 2
    out[:, start : start + target] = _to_u8(band)
    return out


def erase(image: np.ndarray, x: int, y: int, patch: int = 4) -> np.ndarray:
    out = np.array(image, copy=True)
    out[y : y + patch, x : x + patch] = 0
    return out


def erase_corner_range(patch: int = 4, region: int = 20, size: int = SIZE) -> tuple[int, int]:
    """Inclusive range of legal patch corners inside the central region."""
    lo = (size - region) // 2
    return lo, lo + region - patch


# -- random steps ---------------------------------------------------------------


def augment_rotate(image, rng: np.random.Generator, max_degrees=30.0, prob=0.5):
    apply = rng.random() < prob
    angle = rng.uniform(-max_degrees, max_degrees)
    return rotate(image, angle) if apply else np.array(image, copy=True)


def augment_translate(image, rng: np.random.Generator, cap: Optional[int] = None, margins: Optional[Margins] = None):
    if margins is None:
        margins = compute_margins(image)
    dx, dy = translate_offsets(margins, rng, cap)
    return shift(image, dx, dy)


def augment_width(image, rng: np.random.Generator, squeeze_range=(0.0, 0.25)):
    lo, hi = squeeze_range
    factor = 1.0 - rng.uniform(lo, hi)
    return squeeze_width(image, factor)


def augment_erase(image, rng: np.random.Generator, patch=4, region=20):
    lo, hi = erase_corner_range(patch, region, np.asarray(image).shape[0])
    x = int(rng.integers(lo, hi + 1))
    y = int(rng.integers(lo, hi + 1))
    return erase(image, x, y, patch)


class Strategy(str, enum.Enum):
    FULL = "full"
    TRANSLATE_2PX = "translate-2px"
    TRANSLATE_MARGIN = "translate-margin"
    NONE = "none"


_STRATEGY_STEPS = {
    Strategy.FULL: ("rotate", "translate", "width", "erase"),
    Strategy.TRANSLATE_2PX: ("translate",),
    Strategy.TRANSLATE_MARGIN: ("translate",),
    Strategy.NONE: (),
}


@dataclass
class AugmentConfig:
    """Augmentation settings.

    ``strategy`` picks the enabled steps; ``rotate``/``translate``/``width``/
    ``erase`` override that choice per step when set. ``*_prob`` is the
    chance that an enabled step is applied to a given image.
    """

    strategy: Strategy = Strategy.FULL
    rotation_max_deg: float = 30.0
    rotation_prob: float = 0.5
    translate_cap: Optional[int] = None
    translate_prob: float = 1.0
    width_squeeze_range: tuple = (0.0, 0.25)
    width_prob: float = 1.0
    erase_patch: int = 4
    erase_region: int = 20
    erase_prob: float = 1.0
    rotate: Optional[bool] = None
    translate: Optional[bool] = None
    width: Optional[bool] = None
    erase: Optional[bool] = None

    def __post_init__(self):
        try:
            self.strategy = Strategy(self.strategy)
        except ValueError:
            choices = ", ".join(s.value for s in Strategy)
            raise ConfigError(f"unknown augmentation strategy {self.strategy!r}; choose one of {choices}") from None
        self.width_squeeze_range = tuple(float(v) for v in self.width_squeeze_range)
        lo, hi = self.width_squeeze_range
        if not 0.0 <= lo <= hi < 1.0:
            raise ConfigError(f"width_squeeze_range must satisfy 0 <= lo <= hi < 1, got {self.width_squeeze_range}")
        for name in ("rotation_prob", "translate_prob", "width_prob", "erase_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0 < self.erase_patch <= self.erase_region <= SIZE:
            raise ConfigError("erase_patch must fit inside erase_region, which must fit the canvas")

    def steps(self) -> tuple:
        base = _STRATEGY_STEPS[self.strategy]
        enabled = []
        for name in ("rotate", "translate", "width", "erase"):
            override = getattr(self, name)
            if override if override is not None else name in base:
                enabled.append(name)
        return tuple(enabled)

    def effective_translate_cap(self) -> Optional[int]:
        if self.translate_cap is not None:
            return self.translate_cap
        return 2 if self.strategy is Strategy.TRANSLATE_2PX else None


_OPS = {
    "rotate": rngmod.OP_ROTATE,
    "translate": rngmod.OP_TRANSLATE,
    "width": rngmod.OP_WIDTH,
    "erase": rngmod.OP_ERASE,
}


def augment_image(
    image: np.ndarray,
    config: AugmentConfig,
    streams: Callable[[int, int, int], np.random.Generator],
    epoch: int,
    index: int,
) -> np.ndarray:
    """Run the enabled steps in order on one image.

    ``streams(epoch, index, op)`` supplies the generator for each step; see
    :class:`hvcnet.rng.StreamFactory`.
    """
    out = np.array(image, dtype=np.uint8, copy=True)
    for name in config.steps():
        g = streams(epoch, index, _OPS[name])
        if name == "rotate":
            out = augment_rotate(out, g, config.rotation_max_deg, config.rotation_prob)
            continue
        if g.random() >= getattr(config, f"{name}_prob"):
            continue
        if name == "translate":
            # margins must reflect the current (possibly rotated) ink
            out = augment_translate(out, g, config.effective_translate_cap())
        elif name == "width":
            out = augment_width(out, g, config.width_squeeze_range)
        else:
            out = augment_erase(out, g, config.erase_patch, config.erase_region)
    return out


def augment_pipeline(image, config: AugmentConfig, seed: int, epoch: int = 0, index: int = 0) -> np.ndarray:
    return augment_image(image, config, rngmod.StreamFactory(seed), epoch, index)


def augment_batch(
    images: np.ndarray,
    indices,
    config: AugmentConfig,
    seed: int,
    epoch: int,
    threads: int = 1,
    streams=None,
) -> np.ndarray:
    """Augment ``images[i]`` for each dataset index ``i`` in ``indices``.

    The result does not depend on ``threads``.
    """
    indices = np.asarray(indices)
    out = np.empty((len(indices),) + images.shape[1:], dtype=np.uint8)
    if not config.steps():
        out[:] = images[indices]
        return out
    streams = streams or rngmod.StreamFactory(seed)

    def work(pos):
        idx = int(indices[pos])
        out[pos] = augment_image(images[idx], config, streams, epoch, idx)

    if threads <= 1:
        for pos in range(len(indices)):
            work(pos)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(indices))))
    return out
