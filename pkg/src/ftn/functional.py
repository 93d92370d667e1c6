"""Fused differentiable kernels built on :mod:`ftn.tensor`.

Spatial tensors are channels-last, ``[B, H, W, C]``.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .tensor import Tensor, _record_macs, add, make_result, matmul

LN_EPS = 1e-5
_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the per-channel affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: input {x.shape} needs affine of shape ({c},), "
                             f"got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ParameterError(f"layer_norm: eps must be positive, got {eps}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gamma.data, beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xhat * gd + bd, (x, gamma, beta), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    t = np.tanh(_GELU_K * (xd + _GELU_C * xd ** 3))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_K * (1.0 + 3.0 * _GELU_C * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return make_result(0.5 * xd * (1.0 + t), (x,), backward, "gelu")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), weight)
    if bias is not None:
        y = add(y, bias)
    return y.reshape(*lead, weight.shape[1])


@lru_cache(maxsize=64)
def _interp_matrix(n: int, factor: int) -> np.ndarray:
    """Row ``o`` holds the align-corners=False weights of output pixel ``o``."""
    out = np.zeros((n * factor, n), dtype=np.float64)
    for o in range(n * factor):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        w1 = src - i0
        out[o, i0] += 1.0 - w1
        out[o, i1] += w1
    out.setflags(write=False)
    return out


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample ``[B, H, W, C]`` by an integer factor (align_corners=False)."""
    if int(factor) != factor or factor < 1:
        raise ParameterError(f"bilinear_upsample: factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if x.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects [B,H,W,C], got {x.shape}")
    if factor == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "upsample")
    _, h, w, _ = x.shape
    ah = _interp_matrix(h, factor).astype(x.dtype)
    aw = _interp_matrix(w, factor).astype(x.dtype)
    out = np.einsum("ph,bhwc,qw->bpqc", ah, x.data, aw, optimize=True)

    def backward(g):
        return (np.einsum("ph,bpqc,qw->bhwc", ah, g, aw, optimize=True),)

    return make_result(out, (x,), backward, "upsample")


def depthwise_conv3x3(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 3x3 correlation with zero padding; ``weight`` is ``[3, 3, C]``."""
    if x.ndim != 4:
        raise DimensionError(f"depthwise_conv3x3 expects [B,H,W,C], got {x.shape}")
    b, h, w, c = x.shape
    if weight.shape != (3, 3, c) or bias.shape != (c,):
        raise DimensionError(f"depthwise_conv3x3: weight {weight.shape}/bias {bias.shape} "
                             f"do not match {c} channels")
    _record_macs(9 * x.size)
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    wd = weight.data
    out = np.broadcast_to(bias.data, x.shape).copy()
    for i in range(3):
        for j in range(3):
            out += xp[:, i:i + h, j:j + w, :] * wd[i, j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(3):
            for j in range(3):
                gxp[:, i:i + h, j:j + w, :] += g * wd[i, j]
                gw[i, j] = (g * xp[:, i:i + h, j:j + w, :]).sum(axis=(0, 1, 2))
        return gxp[:, 1:-1, 1:-1, :], gw, g.sum(axis=(0, 1, 2))

    return make_result(out, (x, weight, bias), backward, "dwconv3x3")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of ``logits[..., K]`` against integer ``labels[...]``."""
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"cross_entropy: labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"cross_entropy: labels must lie in [0, {k}), "
                        f"got range [{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    flat = logp.reshape(-1, k)
    idx = labels.reshape(-1)
    n = flat.shape[0]
    loss = -flat[np.arange(n), idx].sum() / n

    def backward(g):
        d = np.exp(flat)
        d[np.arange(n), idx] -= 1.0
        return ((d * (g / n)).reshape(logits.shape),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
