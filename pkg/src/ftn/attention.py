"""Grouped, global and spatially reduced multi-head self-attention.

Grouped attention tiles a ``[B, H, W, C]`` map into a ``sqrt(G) x sqrt(G)``
grid of cells and runs ordinary attention inside each cell, with the same
projection weights for every cell. ``G = 1`` is plain global attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import DimensionError, LayoutError, ParameterError
from .nn import LayerNorm, Linear, Module, parameter, trunc_normal
from .tensor import Tensor, add, mac_label, matmul, mul, permute, reshape, swap_last

SCORES = "attn_scores"
VALUES = "attn_values"
PROJECTIONS = "attn_proj"


def isqrt_exact(g: int) -> int:
    r = math.isqrt(g)
    if g < 1 or r * r != g:
        raise LayoutError(f"group count {g} is not a positive perfect square")
    return r


@dataclass(frozen=True)
class AttentionSpec:
    heads: int
    head_dim: int = 32
    groups: int = 1
    qkv_bias: bool = True

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise ParameterError(f"heads and head_dim must be positive, got {self.heads}, {self.head_dim}")
        isqrt_exact(self.groups)

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim


@dataclass(frozen=True)
class GridLayout:
    batch: int
    height: int
    width: int
    grid_side: int

    @classmethod
    def of(cls, shape, groups: int) -> "GridLayout":
        b, h, w = shape[:3]
        g = isqrt_exact(groups)
        if h % g or w % g:
            raise LayoutError(f"H={h}, W={w} cannot be tiled by G={groups} groups "
                              f"({g}x{g} grid)")
        return cls(b, h, w, g)

    @property
    def groups(self) -> int:
        return self.grid_side ** 2

    @property
    def group_h(self) -> int:
        return self.height // self.grid_side

    @property
    def group_w(self) -> int:
        return self.width // self.grid_side

    @property
    def group_tokens(self) -> int:
        return self.group_h * self.group_w


def grid_partition(x: Tensor, groups: int) -> Tensor:
    """``[B, H, W, C] -> [B*G, H/g * W/g, C]``; groups are numbered row-major."""
    if x.ndim != 4:
        raise DimensionError(f"grid_partition expects [B,H,W,C], got {x.shape}")
    lay = GridLayout.of(x.shape, groups)
    c = x.shape[3]
    g = lay.grid_side
    t = reshape(x, (lay.batch, g, lay.group_h, g, lay.group_w, c))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (lay.batch * lay.groups, lay.group_tokens, c))


def grid_unpartition(x: Tensor, batch: int, height: int, width: int, groups: int) -> Tensor:
    """Exact inverse of :func:`grid_partition`."""
    lay = GridLayout.of((batch, height, width), groups)
    c = x.shape[-1]
    if x.shape != (batch * lay.groups, lay.group_tokens, c):
        raise DimensionError(f"grid_unpartition: {x.shape} does not match layout {lay}")
    g = lay.grid_side
    t = reshape(x, (batch, g, g, lay.group_h, lay.group_w, c))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (batch, height, width, c))


class Attention(Module):
    """Q/K/V and output projections shared by all attention flavours."""

    def __init__(self, spec: AttentionSpec, rng: np.random.Generator):
        dim = spec.model_dim
        self.spec = spec
        self.q = Linear(dim, dim, rng, bias=spec.qkv_bias)
        self.k = Linear(dim, dim, rng, bias=spec.qkv_bias)
        self.v = Linear(dim, dim, rng, bias=spec.qkv_bias)
        self.proj = Linear(dim, dim, rng)

    def _split(self, t: Tensor) -> Tensor:
        n, length, _ = t.shape
        s = self.spec
        return permute(reshape(t, (n, length, s.heads, s.head_dim)), (0, 2, 1, 3))

    def attend(self, queries: Tensor, context: Tensor, return_probs: bool = False):
        """Attention of ``queries [N, Lq, C]`` over ``context [N, Lk, C]``."""
        s = self.spec
        for t in (queries, context):
            if t.ndim != 3 or t.shape[-1] != s.model_dim:
                raise DimensionError(f"attention expects [N, L, {s.model_dim}], got {t.shape} "
                                     f"({s.heads} heads x {s.head_dim})")
        n, lq, c = queries.shape
        with mac_label(PROJECTIONS):
            q = self._split(self.q(queries))
            k = self._split(self.k(context))
            v = self._split(self.v(context))
        with mac_label(SCORES):
            scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(s.head_dim))
        probs = F.softmax(scores, axis=-1)
        with mac_label(VALUES):
            out = matmul(probs, v)
        out = reshape(permute(out, (0, 2, 1, 3)), (n, lq, c))
        with mac_label(PROJECTIONS):
            out = self.proj(out)
        return (out, probs.data) if return_probs else out


def multi_head_attention(x: Tensor, attn: Attention, return_probs: bool = False):
    """Global self-attention over the token axis of ``x [N, L, C]``."""
    return attn.attend(x, x, return_probs=return_probs)


def pg_msa(x: Tensor, attn: Attention, groups: int | None = None) -> Tensor:
    """Self-attention restricted to the cells of a ``sqrt(G) x sqrt(G)`` grid."""
    groups = attn.spec.groups if groups is None else groups
    if x.ndim != 4:
        raise DimensionError(f"pg_msa expects [B,H,W,C], got {x.shape}")
    b, h, w, _ = x.shape
    tokens = grid_partition(x, groups)
    return grid_unpartition(multi_head_attention(tokens, attn), b, h, w, groups)


class SpatialReduction(Module):
    """Merge each RxR cell: concatenate R^2 tokens, project to C, layer-normalize."""

    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        if ratio < 1:
            raise ParameterError(f"reduction ratio must be >= 1, got {ratio}")
        self.ratio = ratio
        if ratio > 1:
            self.reduce = Linear(ratio * ratio * dim, dim, rng)
            self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        r = self.ratio
        if h % r or w % r:
            raise LayoutError(f"H={h}, W={w} not divisible by reduction ratio R={r}")
        if r == 1:
            return reshape(x, (b, h * w, c))
        t = reshape(x, (b, h // r, r, w // r, r, c))
        t = permute(t, (0, 1, 3, 2, 4, 5))
        t = reshape(t, (b, (h // r) * (w // r), r * r * c))
        with mac_label(PROJECTIONS):
            t = self.reduce(t)
        return self.norm(t)


def sr_msa(x: Tensor, attn: Attention, reduction: SpatialReduction, return_probs: bool = False):
    """All HW queries attend over HW/R^2 merged key/value tokens."""
    if x.ndim != 4:
        raise DimensionError(f"sr_msa expects [B,H,W,C], got {x.shape}")
    b, h, w, c = x.shape
    context = reduction(x)
    res = attn.attend(reshape(x, (b, h * w, c)), context, return_probs=return_probs)
    out, probs = res if return_probs else (res, None)
    out = reshape(out, (b, h, w, c))
    return (out, probs) if return_probs else out


class PGMSA(Module):
    def __init__(self, spec: AttentionSpec, rng: np.random.Generator):
        self.attn = Attention(spec, rng)

    def forward(self, x: Tensor) -> Tensor:
        return pg_msa(x, self.attn)


class SRMSA(Module):
    def __init__(self, spec: AttentionSpec, ratio: int, rng: np.random.Generator):
        self.attn = Attention(spec, rng)
        self.sr = SpatialReduction(spec.model_dim, ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        return sr_msa(x, self.attn, self.sr)


class PEG(Module):
    """Conditional position encoding: ``x + dwconv3x3(x)``."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.weight = parameter(trunc_normal(rng, (3, 3, dim)))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return cpe(x, self.weight, self.bias)


def cpe(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    with mac_label("cpe"):
        return add(x, F.depthwise_conv3x3(x, weight, bias))
