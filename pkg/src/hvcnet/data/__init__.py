"""Digit image I/O and label-preserving augmentation."""

from .augment import (
    AugmentConfig,
    Margins,
    Strategy,
    augment_batch,
    augment_erase,
    augment_image,
    augment_pipeline,
    augment_rotate,
    augment_translate,
    augment_width,
    compute_margins,
)
from .idx import ImageSet, load_idx, write_idx

__all__ = [
    "AugmentConfig",
    "ImageSet",
    "Margins",
    "Strategy",
    "augment_batch",
    "augment_erase",
    "augment_image",
    "augment_pipeline",
    "augment_rotate",
    "augment_translate",
    "augment_width",
    "compute_margins",
    "load_idx",
    "write_idx",
]
