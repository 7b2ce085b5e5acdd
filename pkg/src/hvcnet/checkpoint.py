"""Versioned binary checkpoints.

Layout (little-endian)::

    b"HVCK"  u32 version
    u32 len, utf-8 model config (key = value lines)
    u32 epoch  u64 optimizer step  f64 best accuracy  i32 best epoch
    u32 param count, then per param:   u16 len, name, u8 trainable, u8 ndim, u32 dims...
    u32 buffer count, then per buffer: u16 len, name, u8 ndim, u32 dims...
    parameter payload     f32, manifest order
    u8 has EMA,   EMA payload     f32, trainable params in manifest order
    u8 has Adam,  first moments, second moments  f32, same order
    buffer payload        f32
    u32 len, utf-8 RNG state (JSON)

Saving the same state twice produces identical bytes.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import model_config_from_text, model_config_text
from .errors import FormatError
from .model import HVCNet, build
from .train import AdamState, TrainState

MAGIC = b"HVCK"
VERSION = 1


@dataclass
class Checkpoint:
    model: HVCNet
    state: TrainState


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _write_str(fh, text: str, width="<I"):
    data = text.encode("utf-8")
    fh.write(struct.pack(width, len(data)))
    fh.write(data)


def checkpoint_bytes(model: HVCNet, state: TrainState) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    _write_str(fh, model_config_text(model.config))
    fh.write(struct.pack("<IQdi", state.epoch, state.adam.step, state.best_accuracy, state.best_epoch))

    params = model.params
    fh.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        _write_str(fh, name, "<H")
        fh.write(struct.pack("<BB", int(p.requires_grad), p.ndim))
        fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
    buffers = model.buffers()
    fh.write(struct.pack("<I", len(buffers)))
    for name, b in buffers.items():
        _write_str(fh, name, "<H")
        fh.write(struct.pack("<B", b.ndim))
        fh.write(struct.pack(f"<{b.ndim}I", *b.shape))

    trainable = [n for n, p in params.items() if p.requires_grad]
    for p in params.values():
        fh.write(_f32(p.data))
    has_ema = bool(state.ema) and all(n in state.ema for n in trainable)
    fh.write(struct.pack("<B", int(has_ema)))
    if has_ema:
        for n in trainable:
            fh.write(_f32(state.ema[n]))
    has_adam = all(n in state.adam.m for n in trainable) and state.adam.step > 0
    fh.write(struct.pack("<B", int(has_adam)))
    if has_adam:
        for n in trainable:
            fh.write(_f32(state.adam.m[n]))
        for n in trainable:
            fh.write(_f32(state.adam.v[n]))
    for b in buffers.values():
        fh.write(_f32(b))
    _write_str(fh, json.dumps({"seed": state.seed}, sort_keys=True))
    return fh.getvalue()


def save_checkpoint(path, model: HVCNet, state: TrainState) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, state))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, width: str, what: str) -> str:
        (n,) = self.unpack(width, what)
        return self.take(n, what).decode("utf-8")

    def array(self, shape, what: str) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").reshape(shape).copy()


def load_checkpoint(path, dtype=np.float32) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), dtype=dtype)


def parse_checkpoint(buf: bytes, dtype=np.float32) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    config = model_config_from_text(r.string("<I", "model config"))
    epoch, step, best_acc, best_epoch = r.unpack("<IQdi", "counters")

    model, _ = build(config, seed=0, dtype=np.float32)
    (count,) = r.unpack("<I", "parameter count")
    names = []
    for _ in range(count):
        start = r.pos
        name = r.string("<H", "parameter name")
        trainable, ndim = r.unpack("<BB", "parameter header")
        shape = r.unpack(f"<{ndim}I", "parameter shape")
        p = model.params.get(name)
        if p is None or p.shape != tuple(shape):
            raise FormatError(f"parameter {name!r} with shape {shape} does not fit the stored model config", start)
        p.requires_grad = bool(trainable)
        names.append(name)
    if set(names) != set(model.params):
        raise FormatError("checkpoint parameter list does not match the model", r.pos)
    (bcount,) = r.unpack("<I", "buffer count")
    buffers = model.buffers()
    bnames = []
    for _ in range(bcount):
        start = r.pos
        name = r.string("<H", "buffer name")
        (ndim,) = r.unpack("<B", "buffer header")
        shape = r.unpack(f"<{ndim}I", "buffer shape")
        if name not in buffers or buffers[name].shape != tuple(shape):
            raise FormatError(f"buffer {name!r} does not fit the stored model config", start)
        bnames.append(name)

    for name in names:
        model.params[name].data = r.array(model.params[name].shape, f"parameter {name}")
    trainable = [n for n in names if model.params[n].requires_grad]
    state = TrainState(epoch=epoch, best_accuracy=best_acc, best_epoch=best_epoch)
    (has_ema,) = r.unpack("<B", "EMA flag")
    if has_ema:
        state.ema = {n: r.array(model.params[n].shape, f"EMA {n}") for n in trainable}
    (has_adam,) = r.unpack("<B", "Adam flag")
    adam = AdamState(step=step)
    if has_adam:
        adam.m = {n: r.array(model.params[n].shape, f"Adam m {n}") for n in trainable}
        adam.v = {n: r.array(model.params[n].shape, f"Adam v {n}") for n in trainable}
    state.adam = adam
    for name in bnames:
        buffers[name][...] = r.array(buffers[name].shape, f"buffer {name}")
    rng_state = json.loads(r.string("<I", "rng state"))
    state.seed = int(rng_state.get("seed", 0))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint payload", r.pos)

    dtype = np.dtype(dtype)
    if dtype != np.float32:
        model.astype(dtype)
        state.ema = {k: v.astype(dtype) for k, v in state.ema.items()}
        adam.m = {k: v.astype(dtype) for k, v in adam.m.items()}
        adam.v = {k: v.astype(dtype) for k, v in adam.v.items()}
    return Checkpoint(model, state)
