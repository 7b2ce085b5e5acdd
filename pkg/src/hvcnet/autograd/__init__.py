"""Minimal dense-tensor core with reverse-mode automatic differentiation."""

from .core import Graph, Tensor, backward, no_record, record
from .ops import (
    BatchNormState,
    add,
    batch_norm,
    capsule_product,
    conv2d_valid,
    matmul,
    mul,
    reduce_sum,
    relu,
    reshape,
    softmax_cross_entropy,
    stack,
    transpose,
)

__all__ = [
    "BatchNormState",
    "Graph",
    "Tensor",
    "add",
    "backward",
    "batch_norm",
    "capsule_product",
    "conv2d_valid",
    "matmul",
    "mul",
    "no_record",
    "record",
    "reduce_sum",
    "relu",
    "reshape",
    "softmax_cross_entropy",
    "stack",
    "transpose",
]
