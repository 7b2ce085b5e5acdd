"""Network assembly: config, parameter manifest, forward pass.

The trunk is a stack of unpadded 3x3 convolutions, each followed by batch
norm and ReLU. Branches tap the trunk after convolutions 3, 6 and 9 and each
produce class logits, either through an HVC head or, for ablations, through a
plain fully connected layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autograd import (
    BatchNormState,
    Tensor,
    add,
    batch_norm,
    conv2d_valid,
    matmul,
    relu,
    reshape,
)
from .capsules import (
    CapsuleDerivation,
    MergeMode,
    branch_logits,
    capsule_shape,
    derive_capsules,
    hvc_class_vectors,
    init_hvc_weights,
    init_merge_weights,
    merge_branches,
)
from .errors import ConfigError, DimensionError

DEFAULT_LADDER = (32, 48, 64, 80, 96, 112, 128, 144, 160)
HEADS = ("hvc", "fc")
CAPSULE_BN_MODES = ("class-dim", "dim")


@dataclass
class ModelConfig:
    """Declarative description of one network variant.

    ``capsule_bn`` selects the axes of the batch norm applied to class
    vectors: ``"class-dim"`` keeps separate statistics and scale/shift for
    every (class, dimension) pair, ``"dim"`` shares them across classes.
    ``custom_ladder`` lifts the 32-plus-16 filter ladder check so that tiny
    networks can be built for fast tests.
    """

    conv_filters: tuple = DEFAULT_LADDER
    branch_taps: tuple = (3, 6, 9)
    head: str = "hvc"
    derivation: CapsuleDerivation = CapsuleDerivation.Z
    branches: int = 3
    merge: MergeMode = MergeMode.ONES_INIT
    class_count: int = 10
    input_size: int = 28
    input_channels: int = 1
    capsule_bn: str = "class-dim"
    custom_ladder: bool = False

    def __post_init__(self):
        self.conv_filters = tuple(int(f) for f in self.conv_filters)
        self.branch_taps = tuple(int(t) for t in self.branch_taps)
        self.derivation = CapsuleDerivation(self.derivation)
        self.merge = MergeMode(self.merge)
        self.validate()

    def validate(self):
        filters = self.conv_filters
        if not self.custom_ladder:
            if len(filters) != 9 or filters[0] != 32:
                raise ConfigError(f"conv ladder must be 9 convolutions starting at 32, got {filters}")
            steps = {b - a for a, b in zip(filters, filters[1:])}
            if steps != {16}:
                raise ConfigError(f"each convolution must add 16 filters, got {filters}")
            if self.branch_taps != (3, 6, 9):
                raise ConfigError(f"branch taps must be after convs 3, 6, 9, got {self.branch_taps}")
        if not filters:
            raise ConfigError("conv ladder is empty")
        taps = self.branch_taps
        if list(taps) != sorted(set(taps)) or taps[0] < 1 or taps[-1] != len(filters):
            raise ConfigError(f"branch taps {taps} must be increasing and end at the last convolution")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.branches not in (1, len(taps)):
            raise ConfigError(f"branches must be 1 or {len(taps)}, got {self.branches}")
        if self.branches == 1 and self.merge is not MergeMode.NOT_LEARNABLE:
            raise ConfigError(
                f"merge mode {self.merge.value!r} needs {len(taps)} branches; a single-branch "
                "network has nothing to merge (use 'not-learnable')"
            )
        if self.capsule_bn not in CAPSULE_BN_MODES:
            raise ConfigError(f"capsule_bn must be one of {CAPSULE_BN_MODES}, got {self.capsule_bn!r}")
        if self.class_count < 2:
            raise ConfigError("class_count must be at least 2")
        if self.input_size - 2 * len(filters) < 1:
            raise ConfigError(f"{len(filters)} unpadded convolutions do not fit a {self.input_size}px input")

    @property
    def active_taps(self) -> tuple:
        return self.branch_taps if self.branches > 1 else self.branch_taps[-1:]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def head_name(self) -> str:
        return f"hvc-{self.derivation.value}" if self.head == "hvc" else "fc"


def parse_head(text: str) -> dict:
    """``"hvc-z"`` / ``"hvc-xy"`` / ``"fc"`` -> ModelConfig keyword arguments."""
    text = text.strip().lower()
    if text == "fc":
        return {"head": "fc"}
    if text in ("hvc-z", "hvc-xy"):
        return {"head": "hvc", "derivation": text.split("-")[1]}
    raise ConfigError(f"unknown head {text!r}; expected hvc-z, hvc-xy or fc")


def effective_receptive_field(depth: int, kernel: int = 3) -> int:
    """Input pixels seen by one unit after ``depth`` stride-1 convolutions."""
    return 1 + depth * (kernel - 1)


def tap_shapes(config: ModelConfig) -> list[tuple[int, int, int]]:
    """``(H, W, C)`` of the feature maps at every active tap."""
    return [
        (config.input_size - 2 * t, config.input_size - 2 * t, config.conv_filters[t - 1])
        for t in config.active_taps
    ]


@dataclass
class ParamEntry:
    name: str
    layer: str
    role: str
    shape: tuple
    trainable: bool

    @property
    def count(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class ParamManifest:
    entries: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(e.count for e in self.entries)

    @property
    def trainable_total(self) -> int:
        return sum(e.count for e in self.entries if e.trainable)

    def count_role(self, *roles) -> int:
        return sum(e.count for e in self.entries if e.role in roles)

    @property
    def core_weights(self) -> int:
        return self.count_role("conv-kernel", "hvc-weight", "fc-weight")

    def names(self) -> list:
        return [e.name for e in self.entries]

    def table(self) -> str:
        width = max([len(e.name) for e in self.entries] + [4])
        lines = [f"{'name':<{width}}  {'role':<13} {'shape':<16} {'count':>10}  trainable"]
        for e in self.entries:
            shape = "x".join(str(s) for s in e.shape)
            lines.append(
                f"{e.name:<{width}}  {e.role:<13} {shape:<16} {e.count:>10,}  {'yes' if e.trainable else 'no'}"
            )
        lines.append(f"core weights (conv + head): {self.core_weights:,}")
        lines.append(f"trainable total: {self.trainable_total:,}")
        lines.append(f"grand total: {self.total:,}")
        return "\n".join(lines)


class HVCNet:
    """Parameters, batch-norm statistics and the forward pass of one variant."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.roles: dict[str, str] = {}
        self.bn_states: dict[str, BatchNormState] = {}

    # -- parameter bookkeeping -------------------------------------------------
    def _add(self, name, values, role, trainable=True):
        self.params[name] = Tensor(values.astype(self.dtype), requires_grad=trainable, name=name)
        self.roles[name] = role

    def _add_bn(self, prefix, shape):
        self._add(f"{prefix}.gamma", np.ones(shape), "bn-scale")
        self._add(f"{prefix}.beta", np.zeros(shape), "bn-shift")
        self.bn_states[prefix] = BatchNormState.create(shape, dtype=self.dtype)

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def manifest(self) -> ParamManifest:
        entries = []
        for name, p in self.params.items():
            entries.append(ParamEntry(name, name.rsplit(".", 1)[0], self.roles[name], p.shape, p.requires_grad))
        return ParamManifest(entries)

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, st in self.bn_states.items():
            out[f"{prefix}.running_mean"] = st.mean
            out[f"{prefix}.running_var"] = st.var
        return out

    def astype(self, dtype) -> "HVCNet":
        dtype = np.dtype(dtype)
        self.dtype = dtype
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for st in self.bn_states.values():
            st.mean = st.mean.astype(dtype)
            st.var = st.var.astype(dtype)
        return self

    @property
    def merge_weights(self) -> Optional[np.ndarray]:
        w = self.params.get("merge.weight")
        return None if w is None else w.data.copy()

    # -- forward ---------------------------------------------------------------
    def _check_input(self, x):
        cfg = self.config
        expected = (cfg.input_size, cfg.input_size, cfg.input_channels)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"input batch must be (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}")

    def forward(self, x, training=False, return_taps=False):
        """Return ``(final_logits, branch_logits)``; with ``return_taps`` also the tap maps."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        self._check_input(x)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        cfg = self.config
        p = self.params
        taps = []
        h = x
        for i in range(1, len(cfg.conv_filters) + 1):
            h = conv2d_valid(h, p[f"conv{i}.kernel"])
            h = relu(batch_norm(h, p[f"conv{i}.bn.gamma"], p[f"conv{i}.bn.beta"], self.bn_states[f"conv{i}.bn"], training))
            if i in cfg.active_taps:
                taps.append(h)

        logits = []
        for b, fmaps in enumerate(taps, start=1):
            if cfg.head == "hvc":
                caps = derive_capsules(fmaps, cfg.derivation)
                vecs = hvc_class_vectors(caps, p[f"branch{b}.hvc.weight"])
                vecs = relu(batch_norm(vecs, p[f"branch{b}.bn.gamma"], p[f"branch{b}.bn.beta"], self.bn_states[f"branch{b}.bn"], training))
                logits.append(branch_logits(vecs))
            else:
                flat = reshape(fmaps, (fmaps.shape[0], -1))
                logits.append(add(matmul(flat, p[f"branch{b}.fc.weight"]), p[f"branch{b}.fc.bias"]))

        if len(logits) == 1:
            final = logits[0]
        else:
            final = merge_branches(logits, p["merge.weight"], expected=len(cfg.branch_taps))
        if return_taps:
            return final, logits, taps
        return final, logits

    __call__ = forward


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> tuple[HVCNet, ParamManifest]:
    """Create a freshly initialized network and its parameter manifest."""
    config.validate()
    rng = np.random.default_rng(seed)
    model = HVCNet(config, dtype=dtype)
    cin = config.input_channels
    for i, cout in enumerate(config.conv_filters, start=1):
        bound = np.sqrt(6.0 / (9 * cin))
        model._add(f"conv{i}.kernel", rng.uniform(-bound, bound, size=(3, 3, cin, cout)), "conv-kernel")
        model._add_bn(f"conv{i}.bn", (cout,))
        cin = cout

    m = config.class_count
    for b, (h, w, c) in enumerate(tap_shapes(config), start=1):
        if config.head == "hvc":
            n, d = capsule_shape((h, w, c), config.derivation)
            model._add(f"branch{b}.hvc.weight", init_hvc_weights(n, m, d, rng), "hvc-weight")
            model._add_bn(f"branch{b}.bn", (m, d) if config.capsule_bn == "class-dim" else (d,))
        else:
            fan_in = h * w * c
            bound = 1.0 / np.sqrt(fan_in)
            model._add(f"branch{b}.fc.weight", rng.uniform(-bound, bound, size=(fan_in, m)), "fc-weight")
            model._add(f"branch{b}.fc.bias", np.zeros(m), "fc-bias")

    if config.branches > 1:
        merge = init_merge_weights(config.merge, config.branches, rng, dtype=model.dtype)
        model.params["merge.weight"] = merge
        model.roles["merge.weight"] = "merge-weight"
    return model, model.manifest()
