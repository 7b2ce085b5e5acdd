"""Flat ``key = value`` run configuration.

Every accepted key is listed in :data:`KEYS` together with its section and a
one-line description; unknown keys are rejected. Blank lines and lines
starting with ``#`` are ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

from .data.augment import AugmentConfig
from .errors import ConfigError
from .model import ModelConfig, parse_head
from .train import TrainConfig


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_bool(text: str):
    return None if text.strip().lower() in ("", "auto", "none") else _bool(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _range(text: str):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise ValueError(f"expected two numbers, got {text!r}")
    return (float(parts[0]), float(parts[1]))


def _ints(text: str):
    return tuple(int(p) for p in text.replace(",", " ").split())


class Key(NamedTuple):
    section: str  # train | model | augment | path
    field: str
    parse: Callable
    help: str


KEYS: dict[str, Key] = {
    "epochs": Key("train", "epochs", int, "number of training epochs (default 300)"),
    "base_lr": Key("train", "base_lr", float, "Adam learning rate at epoch 0 (default 0.001)"),
    "lr_decay": Key("train", "lr_decay", float, "learning-rate multiplier applied once per epoch (default 0.98)"),
    "ema_decay": Key("train", "ema_decay", float, "decay of the weight moving average used for evaluation (default 0.999)"),
    "batch_size": Key("train", "batch_size", int, "training batch size (default 120)"),
    "eval_batch_size": Key("train", "eval_batch_size", int, "evaluation batch size (default 500)"),
    "seed": Key("train", "seed", int, "seed for initialization, shuffling and augmentation (default 0)"),
    "threads": Key("train", "threads", int, "worker threads for augmentation and BLAS (default 1)"),
    "queue_depth": Key("train", "queue_depth", int, "batches prepared ahead of the training step (default 2)"),
    "dtype": Key("train", "dtype", str, "float32 (training) or float64 (verification)"),
    "head": Key("model", "head", str, "branch head: hvc-z, hvc-xy or fc (default hvc-z)"),
    "branches": Key("model", "branches", int, "1 (deepest tap only) or 3 (default 3)"),
    "merge": Key("model", "merge", str, "not-learnable, random-init or ones-init (default ones-init)"),
    "class_count": Key("model", "class_count", int, "number of classes (default 10)"),
    "capsule_bn": Key("model", "capsule_bn", str, "class-vector batch norm axes: class-dim or dim (default class-dim)"),
    "conv_filters": Key("model", "conv_filters", _ints, "filters per convolution (default 32 48 ... 160)"),
    "branch_taps": Key("model", "branch_taps", _ints, "convolutions after which branches tap (default 3 6 9)"),
    "custom_ladder": Key("model", "custom_ladder", _bool, "allow a non-standard filter ladder (default false)"),
    "augment": Key("augment", "strategy", str, "full, translate-2px, translate-margin or none (default full)"),
    "rotation_max_deg": Key("augment", "rotation_max_deg", float, "maximum rotation in degrees (default 30)"),
    "rotation_prob": Key("augment", "rotation_prob", float, "probability a rotation is applied (default 0.5)"),
    "translate_cap": Key("augment", "translate_cap", _opt_int, "maximum translation in pixels, none = full margin"),
    "translate_prob": Key("augment", "translate_prob", float, "probability a translation is applied (default 1)"),
    "width_squeeze_range": Key("augment", "width_squeeze_range", _range, "min and max width reduction (default 0 0.25)"),
    "width_prob": Key("augment", "width_prob", float, "probability the width squeeze is applied (default 1)"),
    "erase_patch": Key("augment", "erase_patch", int, "side of the erased square (default 4)"),
    "erase_region": Key("augment", "erase_region", int, "side of the central region holding the patch (default 20)"),
    "erase_prob": Key("augment", "erase_prob", float, "probability the erasure is applied (default 1)"),
    "rotate": Key("augment", "rotate", _opt_bool, "force rotation on/off (default: per strategy)"),
    "translate": Key("augment", "translate", _opt_bool, "force translation on/off (default: per strategy)"),
    "width": Key("augment", "width", _opt_bool, "force width squeeze on/off (default: per strategy)"),
    "erase": Key("augment", "erase", _opt_bool, "force erasure on/off (default: per strategy)"),
    "train_images": Key("path", "train_images", str, "IDX training images (optionally .gz)"),
    "train_labels": Key("path", "train_labels", str, "IDX training labels"),
    "test_images": Key("path", "test_images", str, "IDX test images"),
    "test_labels": Key("path", "test_labels", str, "IDX test labels"),
    "train_subset": Key("path", "train_subset", _opt_int, "use only the first N training images"),
    "test_subset": Key("path", "test_subset", _opt_int, "use only the first N test images"),
}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)


def parse_text(text: str, origin: str = "<config>") -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def build_run_config(values: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Apply raw string ``values`` on top of ``base`` (defaults when None)."""
    base = base or RunConfig()
    sections = {
        "train": {},
        "model": {},
        "augment": {},
    }
    paths = dict(base.paths)
    for key, raw in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        entry = KEYS[key]
        try:
            if entry.section == "model" and key == "head":
                sections["model"].update(parse_head(raw))
                continue
            value = entry.parse(raw) if isinstance(raw, str) else raw
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
        if entry.section == "path":
            paths[entry.field] = value
        else:
            sections[entry.section][entry.field] = value
    if sections["model"].get("branches") == 1 and "merge" not in values:
        sections["model"]["merge"] = "not-learnable"
    try:
        model = dataclasses.replace(base.train.model, **sections["model"])
        augment = dataclasses.replace(base.train.augment, **sections["augment"])
        train = dataclasses.replace(base.train, model=model, augment=augment, **sections["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(train, paths)


def load_run_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Read a config file (optional) and apply overrides; overrides win."""
    values = {}
    if path is not None:
        values.update(parse_text(Path(path).read_text(), str(path)))
    values.update(overrides or {})
    return build_run_config(values)


def model_config_text(config: ModelConfig) -> str:
    """Serialize a model config as ``key = value`` lines."""
    lines = [
        f"head = {config.head_name}",
        f"branches = {config.branches}",
        f"merge = {config.merge.value}",
        f"class_count = {config.class_count}",
        f"capsule_bn = {config.capsule_bn}",
        f"conv_filters = {' '.join(map(str, config.conv_filters))}",
        f"branch_taps = {' '.join(map(str, config.branch_taps))}",
        f"custom_ladder = {str(config.custom_ladder).lower()}",
    ]
    if config.input_size != 28 or config.input_channels != 1:
        raise ConfigError("only 28x28 single-channel inputs can be serialized")
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str) -> ModelConfig:
    values = parse_text(text)
    for key in values:
        if KEYS[key].section != "model":
            raise ConfigError(f"key {key!r} is not a model setting")
    kwargs = {}
    for key, raw in values.items():
        if key == "head":
            kwargs.update(parse_head(raw))
        else:
            kwargs[KEYS[key].field] = KEYS[key].parse(raw)
    # the ladder check runs on construction, so flags must be in place first
    return ModelConfig(**kwargs)


def describe_keys() -> str:
    width = max(len(k) for k in KEYS)
    return "\n".join(f"  {k:<{width}}  [{v.section}] {v.help}" for k, v in KEYS.items())
