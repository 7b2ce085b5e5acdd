"""Training loop: Adam, per-epoch exponential LR decay, EMA weights, evaluation."""

from __future__ import annotations

import logging
import math
import queue
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import rng as rngmod
from .autograd import Tensor, backward, no_record, record, softmax_cross_entropy
from .data.augment import AugmentConfig, augment_batch
from .data.idx import ImageSet
from .errors import ConfigError, NumericError
from .model import HVCNet, ModelConfig, build

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 300
    base_lr: float = 0.001
    lr_decay: float = 0.98
    ema_decay: float = 0.999
    batch_size: int = 120
    eval_batch_size: int = 500
    seed: int = 0
    threads: int = 1
    queue_depth: int = 2
    dtype: str = "float32"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("base_lr", "lr_decay", "ema_decay"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.threads < 1 or self.queue_depth < 1:
            raise ConfigError("threads and queue_depth must be >= 1")


# -- schedule, optimizer, EMA ------------------------------------------------------


@lru_cache(maxsize=None)
def _lr_table(base: float, decay: float, epoch: int) -> float:
    lr = base
    for _ in range(epoch):
        lr = lr * decay
    return lr


def lr_at(epoch: int, base: float = 0.001, decay: float = 0.98) -> float:
    """Learning rate for ``epoch``: ``base * decay**epoch``, one decay step per epoch.

    Computed by repeated multiplication so that ``lr_at(e + 1) == lr_at(e) * decay``
    holds exactly in floating point.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return _lr_table(float(base), float(decay), int(epoch))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(params: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every tensor in ``params`` (in place)."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)


def ema_init(params: dict) -> dict:
    """Shadow copies of ``params`` (the EMA starts at the initial weights)."""
    return {name: p.data.copy() for name, p in params.items()}


def ema_update(shadow: dict, params: dict, decay: float = 0.999) -> dict:
    """``shadow <- decay * shadow + (1 - decay) * params``, in place."""
    for name, p in params.items():
        s = shadow[name]
        s *= decay
        s += (1 - decay) * p.data
    return shadow


@contextmanager
def swapped_weights(model: HVCNet, weights: Optional[dict]):
    """Temporarily replace parameter values (e.g. with EMA shadows)."""
    if not weights:
        yield model
        return
    saved = {name: model.params[name].data for name in weights}
    try:
        for name, w in weights.items():
            model.params[name].data = w.astype(model.dtype, copy=False)
        yield model
    finally:
        for name, w in saved.items():
            model.params[name].data = w


@dataclass
class TrainState:
    """Everything needed to resume training deterministically.

    Shuffling and augmentation draw from keyed streams derived from
    ``seed`` and the epoch, so the seed is the whole RNG state.
    """

    epoch: int = 0
    adam: AdamState = field(default_factory=AdamState)
    ema: dict = field(default_factory=dict)
    seed: int = 0
    best_accuracy: float = -1.0
    best_epoch: int = -1

    @property
    def step(self) -> int:
        return self.adam.step


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_acc_ema: float
    branch_weights: Optional[np.ndarray]
    batch_losses: list

    def log_line(self) -> str:
        w = self.branch_weights
        ws = [f"{x:.6f}" for x in w] if w is not None else []
        ws += ["nan"] * (3 - len(ws))
        return ", ".join([str(self.epoch), f"{self.lr:.9g}", f"{self.train_loss:.6f}", f"{self.test_acc_ema:.6f}", *ws])


@dataclass
class TrainResult:
    model: HVCNet
    state: TrainState
    history: list
    config: TrainConfig


# -- evaluation -----------------------------------------------------------------------


def predict_logits(model: HVCNet, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Eval-mode logits for uint8 ``(N, 28, 28)`` images."""
    outs = []
    with no_record():
        for start in range(0, len(images), batch_size):
            batch = images[start : start + batch_size]
            x = (batch.astype(model.dtype) / 255.0)[..., None]
            logits, _ = model.forward(x, training=False)
            outs.append(logits.data)
    return np.concatenate(outs) if outs else np.zeros((0, model.config.class_count), dtype=model.dtype)


def evaluate(model: HVCNet, data: ImageSet, ema: Optional[dict] = None, batch_size: int = 500):
    """Return ``(accuracy, predictions)``; ``ema`` weights are swapped in when given."""
    with swapped_weights(model, ema):
        logits = predict_logits(model, data.images, batch_size)
    preds = logits.argmax(axis=1).astype(np.uint8)
    accuracy = float(np.mean(preds == data.labels)) if len(preds) else 0.0
    return accuracy, preds


# -- training ------------------------------------------------------------------------


class _Prefetcher:
    """Background producer of augmented batches, bounded by ``depth``."""

    def __init__(self, producer, items, depth):
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self._error = None
        self._thread = threading.Thread(target=self._run, args=(producer, items), daemon=True)
        self._thread.start()

    def _run(self, producer, items):
        try:
            for item in items:
                self._q.put(producer(item))
        except BaseException as exc:  # re-raised in the consumer
            self._error = exc
        finally:
            self._q.put(None)

    def __iter__(self):
        while True:
            item = self._q.get()
            if item is None:
                if self._error is not None:
                    raise self._error
                return
            yield item


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list:
    """Shuffled index batches for one epoch; a trailing batch of one is dropped."""
    order = rngmod.stream(seed, epoch, 0, rngmod.OP_SHUFFLE).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


def init_state(model: HVCNet, seed: int) -> TrainState:
    return TrainState(ema=ema_init(model.trainable_parameters()), seed=seed)


def train(
    config: TrainConfig,
    train_set: ImageSet,
    test_set: Optional[ImageSet] = None,
    out_dir=None,
    resume=None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Train per ``config``; evaluate with EMA weights after every epoch.

    With ``out_dir`` the metrics log, ``last.hvck`` and the best-accuracy
    ``best.hvck`` are written there. ``resume`` is a checkpoint path.
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    dtype = np.dtype(config.dtype)
    if resume is not None:
        ckpt = load_checkpoint(resume, dtype=dtype)
        model, state = ckpt.model, ckpt.state
        if model.config != config.model:
            raise ConfigError("checkpoint model configuration differs from the requested one")
    else:
        model, _ = build(config.model, seed=config.seed, dtype=dtype)
        state = init_state(model, config.seed)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = model.trainable_parameters()
    history = []
    n = train_set.count

    for epoch in range(state.epoch, config.epochs):
        lr = lr_at(epoch, config.base_lr, config.lr_decay)
        batches = epoch_batches(n, config.batch_size, config.seed, epoch)

        def produce(idx, epoch=epoch):
            imgs = augment_batch(train_set.images, idx, config.augment, config.seed, epoch, threads=config.threads)
            x = (imgs.astype(dtype) / 255.0)[..., None]
            return x, train_set.labels[idx]

        losses = []
        for b, (x, y) in enumerate(_Prefetcher(produce, batches, config.queue_depth)):
            with record():
                logits, _ = model.forward(Tensor(x, dtype=dtype), training=True)
                loss, _ = softmax_cross_entropy(logits, y)
            value = float(loss.item())
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b} (indices {batches[b][:8].tolist()}...)")
            backward(loss)
            adam_step(params, state.adam, lr)
            ema_update(state.ema, params, config.ema_decay)
            losses.append(value)

        acc = float("nan")
        if test_set is not None:
            acc, _ = evaluate(model, test_set, state.ema, config.eval_batch_size)
        state.epoch = epoch + 1
        record_ = EpochRecord(epoch, lr, float(np.mean(losses)) if losses else float("nan"), acc, model.merge_weights, losses)
        history.append(record_)
        logger.info("epoch %s", record_.log_line())
        improved = test_set is not None and acc > state.best_accuracy
        if improved:
            state.best_accuracy, state.best_epoch = acc, epoch
        if out is not None:
            with open(out / "metrics.log", "a") as fh:
                fh.write(record_.log_line() + "\n")
            save_checkpoint(out / "last.hvck", model, state)
            if improved:
                save_checkpoint(out / "best.hvck", model, state)
        if on_epoch is not None:
            on_epoch(record_)

    return TrainResult(model, state, history, config)
