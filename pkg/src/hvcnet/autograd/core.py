"""Tensor and tape-based reverse-mode differentiation.

Operations only record themselves while a :func:`record` block is active and
at least one input requires gradients. The resulting :class:`Graph` is a flat,
topologically ordered list of operations; :func:`backward` walks it once in
reverse and then releases it, so a second call on the same graph fails.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import GraphError

_state = threading.local()

DEFAULT_DTYPE = np.float32


def _active_graph() -> Optional["Graph"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Dense n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the real work lives in ops.py.
    def __mul__(self, other):
        from .ops import mul

        return mul(self, other)

    def __add__(self, other):
        from .ops import add

        return add(self, other)

    def sum(self, axes=None):
        from .ops import reduce_sum

        return reduce_sum(self, axes)

    def reshape(self, *shape):
        from .ops import reshape

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    graph: "Graph"
    index: int


@dataclass
class Operation:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Graph:
    """Ordered record of the operations executed inside one :func:`record` block."""

    def __init__(self):
        self.ops: list[Operation] = []
        self.consumed = False

    def __len__(self):
        return len(self.ops)

    def add(self, name, inputs, out_data, backward_fn) -> Tensor:
        out = Tensor(out_data, requires_grad=True, dtype=out_data.dtype)
        out.node = _Node(self, len(self.ops))
        self.ops.append(Operation(name, tuple(inputs), out, backward_fn))
        return out

    def backward(self, loss: Tensor):
        backward(loss)


@contextmanager
def record():
    """Record differentiable operations executed in the block into a new Graph."""
    graph = Graph()
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    stack.append(graph)
    try:
        yield graph
    finally:
        stack.pop()


@contextmanager
def no_record():
    """Suspend recording, e.g. for evaluation inside a training step."""
    stack = getattr(_state, "stack", None)
    saved = list(stack) if stack else []
    _state.stack = []
    try:
        yield
    finally:
        _state.stack = saved


def track(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``out_data`` as the output of an op, recording it when needed.

    ``backward_fn(grad_out)`` returns one gradient (or None) per input.
    """
    graph = _active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        for t in inputs:
            if t.node is not None and t.node.graph is not graph:
                raise GraphError(f"{name}: input {t!r} was recorded in a different graph")
        return graph.add(name, inputs, out_data, backward_fn)
    return Tensor(out_data, dtype=out_data.dtype)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every gradient-requiring leaf reachable from ``loss``."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise GraphError("loss is detached: it was not produced inside a record() block")
    graph = loss.node.graph
    if graph.consumed:
        raise GraphError("graph already consumed by backward(); re-record the forward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for op in reversed(graph.ops[: loss.node.index + 1]):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        input_grads = op.backward(g)
        for t, tg in zip(op.inputs, input_grads):
            if tg is None or not t.requires_grad:
                continue
            if tg.shape != t.shape:
                raise GraphError(f"{op.name}: gradient shape {tg.shape} != input shape {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg
            if t.node is None:
                leaves[key] = t

    for key, t in leaves.items():
        t.grad = np.asarray(grads[key], dtype=t.data.dtype)

    graph.consumed = True
    graph.ops.clear()
