"""Prediction matrices: per-model predicted labels for a shared test set.

File layout (little-endian)::

    b"HVCP"  u32 version  u32 k  u32 n  u32 m
    labels        n x u8
    predictions   k rows of n x u8
    names         k null-terminated utf-8 strings
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"HVCP"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class PredictionMatrix:
    labels: np.ndarray  # (n,) uint8
    preds: np.ndarray  # (k, n) uint8
    names: list = field(default_factory=list)
    class_count: int = 10

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        self.preds = np.ascontiguousarray(np.atleast_2d(self.preds), dtype=np.uint8)
        if self.preds.shape[1] != self.labels.shape[0]:
            raise ValueError(f"prediction rows have length {self.preds.shape[1]}, labels {self.labels.shape[0]}")
        if not self.names:
            self.names = [f"model{i}" for i in range(self.k)]
        if len(self.names) != self.k:
            raise ValueError(f"{len(self.names)} names for {self.k} models")
        for name in self.names:
            if "\x00" in name:
                raise ValueError(f"model name {name!r} contains a null byte")
        if not 1 <= self.class_count <= 256:
            raise ValueError("class_count must be in [1, 256]")
        top = max(int(self.labels.max(initial=0)), int(self.preds.max(initial=0)))
        if self.n and top >= self.class_count:
            raise ValueError(f"class {top} outside [0, {self.class_count})")

    @property
    def k(self) -> int:
        return self.preds.shape[0]

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    def select(self, models) -> "PredictionMatrix":
        models = list(models)
        return PredictionMatrix(self.labels, self.preds[models], [self.names[i] for i in models], self.class_count)

    def accuracies(self) -> np.ndarray:
        return (self.preds == self.labels).mean(axis=1)

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, VERSION, self.k, self.n, self.class_count), self.labels.tobytes(), self.preds.tobytes()]
        parts += [name.encode("utf-8") + b"\x00" for name in self.names]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PredictionMatrix":
        if len(buf) < _HEADER.size:
            raise FormatError(f"prediction matrix header needs {_HEADER.size} bytes, got {len(buf)}", len(buf))
        magic, version, k, n, m = _HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise FormatError(f"bad prediction matrix magic {magic!r}, expected {MAGIC!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported prediction matrix version {version}", 4)
        if m < 1 or m > 256:
            raise FormatError(f"class count {m} outside [1, 256]", 16)
        pos = _HEADER.size
        need = n * (k + 1)
        if len(buf) < pos + need:
            raise FormatError(f"truncated payload: expected {need} label/prediction bytes, got {len(buf) - pos}", len(buf))
        body = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
        bad = np.flatnonzero(body >= m)
        if bad.size:
            raise FormatError(f"class value {body[bad[0]]} outside [0, {m})", pos + int(bad[0]))
        labels = body[:n].copy()
        preds = body[n:].reshape(k, n).copy()
        pos += need
        names = []
        for i in range(k):
            end = buf.find(b"\x00", pos)
            if end < 0:
                raise FormatError(f"model name {i} is not null-terminated", pos)
            names.append(buf[pos:end].decode("utf-8"))
            pos = end + 1
        if pos != len(buf):
            raise FormatError(f"{len(buf) - pos} trailing bytes after model names", pos)
        return cls(labels, preds, names, m)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PredictionMatrix":
        return cls.from_bytes(Path(path).read_bytes())


def synthetic_matrix(
    k: int,
    n: int,
    accuracy: float = 0.8,
    seed: int = 0,
    class_count: int = 10,
    hard_fraction: Optional[float] = None,
) -> PredictionMatrix:
    """Random prediction matrix for tests and benchmarks.

    With ``hard_fraction=None`` every model errs independently on each sample
    with probability ``1 - accuracy``, choosing a uniformly random wrong class.
    Otherwise errors concentrate, as with real trained models, on a
    ``hard_fraction`` share of samples: each hard sample gets its own error
    rate and a preferred confusion class, the rest are always right.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, class_count, size=n).astype(np.uint8)
    shift = rng.integers(1, class_count, size=(k, n))
    wrong = ((labels.astype(np.int64) + shift) % class_count).astype(np.uint8)
    if hard_fraction is None:
        errs = rng.random((k, n)) > accuracy
    else:
        hard = rng.random(n) < hard_fraction
        rate = np.where(hard, rng.uniform(0.02, 1.0, size=n), 0.0)
        errs = rng.random((k, n)) < rate
        confusion = ((labels.astype(np.int64) + rng.integers(1, class_count, size=n)) % class_count).astype(np.uint8)
        wrong = np.where(rng.random((k, n)) < 0.85, confusion, wrong)
    preds = np.where(errs, wrong, labels)
    return PredictionMatrix(labels, preds, [f"synthetic{i}" for i in range(k)], class_count)
