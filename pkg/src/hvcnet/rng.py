"""Keyed random streams for reproducible, scheduling-independent pipelines.

Each stream is a Philox counter-based generator keyed by the global seed; the
upper counter words hold ``(op, index, epoch)`` and the lowest word is left
for the draws themselves, so distinct keys never overlap.
"""

from __future__ import annotations

import numpy as np

OP_ROTATE = 0
OP_TRANSLATE = 1
OP_WIDTH = 2
OP_ERASE = 3
OP_SHUFFLE = 4
OP_INIT = 5

_MASK64 = (1 << 64) - 1


def stream(seed: int, epoch: int = 0, index: int = 0, op: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, epoch, index, op)``."""
    for name, v in (("seed", seed), ("epoch", epoch), ("index", index), ("op", op)):
        if v < 0:
            raise ValueError(f"{name} must be non-negative, got {v}")
    counter = [0, op & _MASK64, index & _MASK64, epoch & _MASK64]
    return np.random.Generator(np.random.Philox(key=seed & ((1 << 128) - 1), counter=counter))


class StreamFactory:
    """Callable producing keyed streams for one seed.

    Subclass or wrap it to observe which streams are requested (tests use this
    to check the order of augmentation steps).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def __call__(self, epoch: int, index: int, op: int) -> np.random.Generator:
        return stream(self.seed, epoch, index, op)
