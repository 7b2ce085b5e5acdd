"""Differentiable operations used by the network.

Layout is channels-last everywhere: images and feature maps are ``(N, H, W, C)``.

Broadcasting is deliberately narrow. In :func:`mul` and :func:`add` the second
operand ``b`` may have fewer axes than ``a``; it is aligned with the trailing
axes of ``a`` and repeated along the leading ones, and any of its own axes may
have extent 1. ``a`` is never broadcast. Gradients for ``b`` are summed over
the repeated axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DimensionError, UnsupportedConfigurationError
from .core import Tensor, track

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _broadcast_axes(a_shape, b_shape, opname):
    """Axes of ``a`` over which ``b`` is repeated (trailing alignment)."""
    if len(b_shape) > len(a_shape):
        raise DimensionError(f"{opname}: operand of shape {b_shape} has more axes than {a_shape}")
    lead = len(a_shape) - len(b_shape)
    axes = list(range(lead))
    for i, (sa, sb) in enumerate(zip(a_shape[lead:], b_shape)):
        if sb == sa:
            continue
        if sb == 1:
            axes.append(lead + i)
            continue
        raise DimensionError(
            f"{opname}: axis {lead + i} has extent {sa} but operand provides {sb} "
            f"(shapes {a_shape} and {b_shape})"
        )
    return tuple(axes)


def _unbroadcast(grad, b_shape, axes):
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(b_shape)


def mul(a, b) -> Tensor:
    """Element-wise (Hadamard) product."""
    a, b = as_tensor(a), as_tensor(b, dtype=as_tensor(a).dtype)
    axes = _broadcast_axes(a.shape, b.shape, "mul")
    out = a.data * b.data

    def backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape, axes) if b.requires_grad else None
        return ga, gb

    return track("mul", (a, b), out, backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, dtype=as_tensor(a).dtype)
    axes = _broadcast_axes(a.shape, b.shape, "add")
    out = a.data + b.data

    def backward(g):
        return g, _unbroadcast(g, b.shape, axes) if b.requires_grad else None

    return track("add", (a, b), out, backward)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"reduce_sum: axis {ax} out of range for {ndim}-d tensor")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise DimensionError(f"reduce_sum: repeated axis in {tuple(axes)}")
    return tuple(sorted(norm))


def reduce_sum(x, axes=None) -> Tensor:
    """Sum over ``axes`` (all axes when None); the summed axes are removed."""
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    out = np.asarray(x.data.sum(axis=axes), dtype=x.dtype)
    kept = tuple(1 if i in axes else s for i, s in enumerate(x.shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), x.shape).copy(),)

    return track("reduce_sum", (x,), out, backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return track("reshape", (x,), out, backward)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return track("transpose", (x,), out, backward)


def stack(tensors: Sequence[Tensor], axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for i, t in enumerate(tensors):
        if t.shape != shape:
            raise DimensionError(f"stack: tensor {i} has shape {t.shape}, expected {shape}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return track("stack", tensors, out, backward)


def relu(x) -> Tensor:
    """max(x, 0); the gradient at exactly 0 is taken to be 0."""
    x = as_tensor(x)
    mask = x.data > 0
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return track("relu", (x,), out, backward)


def matmul(a, b) -> Tensor:
    """2-D matrix product ``(N, K) @ (K, M)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner axis mismatch {a.shape[1]} vs {b.shape[0]}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return track("matmul", (a, b), out, backward)


def _im2col(x):
    # (N, H, W, C) -> (N, H-2, W-2, 9*C); patch order (dy, dx, c) matches kernel.reshape(9*C, Cout)
    h, w = x.shape[1] - 2, x.shape[2] - 2
    return np.concatenate(
        [x[:, dy : dy + h, dx : dx + w, :] for dy in range(3) for dx in range(3)], axis=-1
    )


def conv2d_valid(x, kernels) -> Tensor:
    """3x3, stride 1, unpadded convolution without bias.

    ``x`` is ``(N, H, W, Cin)``, ``kernels`` is ``(3, 3, Cin, Cout)``;
    the result is ``(N, H-2, W-2, Cout)``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 4:
        raise DimensionError(f"conv2d_valid: input must be (N, H, W, C), got {x.shape}")
    if kernels.ndim != 4 or kernels.shape[:2] != (3, 3):
        raise DimensionError(f"conv2d_valid: kernels must be (3, 3, Cin, Cout), got {kernels.shape}")
    n, h, w, cin = x.shape
    if h < 3:
        raise DimensionError(f"conv2d_valid: axis 1 (height) is {h}, need at least 3")
    if w < 3:
        raise DimensionError(f"conv2d_valid: axis 2 (width) is {w}, need at least 3")
    if kernels.shape[2] != cin:
        raise DimensionError(
            f"conv2d_valid: axis 3 (channels) of input is {cin} but kernels expect {kernels.shape[2]}"
        )
    cout = kernels.shape[3]
    cols = _im2col(x.data).reshape(-1, 9 * cin)
    wmat = kernels.data.reshape(9 * cin, cout)
    out = (cols @ wmat).reshape(n, h - 2, w - 2, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, h - 2, w - 2, 9, cin)
            gx = np.zeros_like(x.data)
            for i in range(9):
                dy, dx = divmod(i, 3)
                gx[:, dy : dy + h - 2, dx : dx + w - 2, :] += dcols[:, :, :, i, :]
        return gx, gk

    return track("conv2d_valid", (x, kernels), out, backward)


def capsule_product(caps, weights) -> Tensor:
    """Per-class sum of element-wise capsule/weight products.

    ``caps`` is ``(N, n, d)``, ``weights`` is ``(n, m, d)``;
    ``out[b, c, :] = sum_i caps[b, i, :] * weights[i, c, :]``.
    Equivalent to ``reduce_sum(mul(caps[:, :, None, :], weights), 1)`` without
    materialising the ``(N, n, m, d)`` intermediate.
    """
    caps, weights = as_tensor(caps), as_tensor(weights)
    if caps.ndim != 3 or weights.ndim != 3:
        raise DimensionError(
            f"capsule_product expects (N, n, d) and (n, m, d), got {caps.shape} and {weights.shape}"
        )
    if caps.shape[1] != weights.shape[0]:
        raise DimensionError(
            f"capsule count mismatch: capsules have n={caps.shape[1]}, weights n={weights.shape[0]}"
        )
    if caps.shape[2] != weights.shape[2]:
        raise DimensionError(
            f"capsule dimension mismatch: capsules have d={caps.shape[2]}, weights d={weights.shape[2]}"
        )
    # batched over d: (d, N, n) @ (d, n, m) -> (d, N, m)
    cd = caps.data.transpose(2, 0, 1)
    wd = weights.data.transpose(2, 0, 1)
    out = np.ascontiguousarray(np.matmul(cd, wd).transpose(1, 2, 0))

    def backward(g):
        gd = g.transpose(2, 0, 1)  # (d, N, m)
        gc = np.ascontiguousarray(np.matmul(gd, wd.transpose(0, 2, 1)).transpose(1, 2, 0)) if caps.requires_grad else None
        gw = np.ascontiguousarray(np.matmul(cd.transpose(0, 2, 1), gd).transpose(1, 2, 0)) if weights.requires_grad else None
        return gc, gw

    return track("capsule_product", (caps, weights), out, backward)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm site."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPSILON
    frozen: bool = field(default=False)

    @classmethod
    def create(cls, shape, dtype=np.float32, **kwargs):
        return cls(np.zeros(shape, dtype=dtype), np.ones(shape, dtype=dtype), **kwargs)


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Normalize ``x`` over its leading axes.

    ``gamma`` and ``beta`` share a shape equal to the trailing axes of ``x``;
    every leading axis is reduced. For ``(N, H, W, C)`` maps with ``(C,)``
    parameters that is the usual per-channel normalization.

    In training mode the batch statistics are used and the running averages in
    ``state`` are updated in place; in evaluation mode the running averages are
    used and nothing is mutated.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    k = x.ndim - gamma.ndim
    if gamma.shape != beta.shape or k < 1 or x.shape[k:] != gamma.shape:
        raise DimensionError(
            f"batch_norm: scale/shift shape {gamma.shape}/{beta.shape} must equal the "
            f"trailing axes of input {x.shape}"
        )
    if state.mean.shape != gamma.shape:
        raise DimensionError(f"batch_norm: running stats shape {state.mean.shape} != {gamma.shape}")
    axes = tuple(range(k))

    if training:
        if x.shape[0] < 2:
            raise UnsupportedConfigurationError(
                "batch_norm in training mode needs a batch of at least 2 samples"
            )
        count = int(np.prod(x.shape[:k]))
        mean = x.data.mean(axis=axes)
        centered = x.data - mean
        var = (centered * centered).mean(axis=axes)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        if not state.frozen:
            m = state.momentum
            unbiased = var * (count / max(count - 1, 1))
            state.mean[...] = m * state.mean + (1 - m) * mean
            state.var[...] = m * state.var + (1 - m) * unbiased
    else:
        centered = x.data - state.mean
        inv_std = 1.0 / np.sqrt(state.var + state.eps)
        count = None
    xhat = (centered * inv_std).astype(x.dtype, copy=False)
    out = xhat * gamma.data + beta.data

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                sum_g = gxhat.sum(axis=axes)
                sum_gx = (gxhat * xhat).sum(axis=axes)
                gx = (inv_std / count) * (count * gxhat - sum_g - xhat * sum_gx)
            else:
                gx = gxhat * inv_std
            gx = gx.astype(x.dtype, copy=False)
        return gx, ggamma, gbeta

    return track("batch_norm", (x, gamma, beta), out.astype(x.dtype, copy=False), backward)


def softmax_cross_entropy(logits, labels):
    """Mean categorical cross-entropy of softmax(logits).

    Returns ``(loss, probs)`` where ``loss`` is a scalar Tensor and ``probs``
    the row-normalized probabilities as a plain array.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (N, M) logits, got {logits.shape}")
    n, m = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch of {n}")
    bad = np.flatnonzero((labels < 0) | (labels >= m))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"label {labels[i]} at sample {i} is outside [0, {m})")
    labels = labels.astype(np.intp)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    probs = np.exp(logp)
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def backward(g):
        grad = probs.copy()
        grad[rows, labels] -= 1
        return ((grad * (g / n)).astype(logits.dtype, copy=False),)

    return track("softmax_cross_entropy", (logits,), loss, backward), probs
