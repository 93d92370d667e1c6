"""Feature Pyramid Transformer decoder.

Wiring: lateral projections to a common width D, a top-down pass
(``merged_i = lateral_i + up2(merged_{i+1})``), then per-branch refinement
that alternates spatial-reduction transformer blocks with x2 bilinear
upsampling until stride 4, and finally fusion of the four branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .attention import SRMSA, AttentionSpec
from .encoder import FeaturePyramid, TransformerBlock
from .errors import ConfigError, LayoutError, ParameterError
from .nn import LayerNorm, Linear, Module
from .tensor import Tensor, add, concat

FUSION_MODES = ("sum", "concat")
AUX_WEIGHT = 0.1
BLOCK_STRIDES = (32, 16, 8)


def _stride_map(value) -> dict[int, int]:
    return {int(k): int(v) for k, v in dict(value).items()}


@dataclass(frozen=True)
class FPTConfig:
    """Decoder width, per-stride block depths and SR ratios, fusion mode."""

    in_dims: tuple[int, ...] = (64, 128, 256, 512)
    embed_dim: int = 512
    depths: dict = field(default_factory=lambda: {32: 1, 16: 1, 8: 1})
    sr_ratios: dict = field(default_factory=lambda: {32: 2, 16: 2, 8: 2})
    fusion: str = "sum"
    num_classes: int = 60
    head_dim: int = 32
    mlp_ratio: int = 4
    aux: bool = True

    def __post_init__(self):
        object.__setattr__(self, "in_dims", tuple(int(d) for d in self.in_dims))
        object.__setattr__(self, "depths", _stride_map(self.depths))
        object.__setattr__(self, "sr_ratios", _stride_map(self.sr_ratios))
        self.validate()

    def validate(self) -> None:
        if len(self.in_dims) != 4 or min(self.in_dims) < 1:
            raise ConfigError(f"in_dims needs four positive entries, got {self.in_dims}")
        if self.embed_dim < 1 or self.num_classes < 1:
            raise ConfigError("embed_dim and num_classes must be positive")
        if self.embed_dim % self.head_dim:
            raise ConfigError(f"embed_dim {self.embed_dim} not a multiple of head_dim {self.head_dim}")
        for name in ("depths", "sr_ratios"):
            m = getattr(self, name)
            if set(m) != set(BLOCK_STRIDES):
                raise ConfigError(f"{name} must map exactly strides {BLOCK_STRIDES}, got {sorted(m)}")
        if min(self.depths.values()) < 0 or min(self.sr_ratios.values()) < 1:
            raise ConfigError("depths must be >= 0 and SR ratios >= 1")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")

    @property
    def heads(self) -> int:
        return self.embed_dim // self.head_dim

    def attention_spec(self) -> AttentionSpec:
        return AttentionSpec(heads=self.heads, head_dim=self.head_dim)

    def branch_plan(self, stage: int) -> list[tuple[str, int]]:
        """Steps of branch ``stage`` (0-based): ("block", stride) / ("up", stride)."""
        plan = []
        stride = 4 * 2 ** stage
        while stride > 4:
            plan += [("block", stride)] * self.depths[stride]
            plan.append(("up", stride))
            stride //= 2
        return plan

    def check_geometry(self, height: int, width: int) -> None:
        for s in BLOCK_STRIDES:
            r = self.sr_ratios[s]
            h, w = height // s, width // s
            if self.depths[s] and (h % r or w % r):
                raise LayoutError(f"decoder stride {s}: {h}x{w} map not divisible by SR ratio {r}")

    def to_dict(self) -> dict:
        return {
            "in_dims": list(self.in_dims), "embed_dim": self.embed_dim,
            "depths": {str(k): v for k, v in self.depths.items()},
            "sr_ratios": {str(k): v for k, v in self.sr_ratios.items()},
            "fusion": self.fusion, "num_classes": self.num_classes,
            "head_dim": self.head_dim, "mlp_ratio": self.mlp_ratio, "aux": self.aux,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FPTConfig":
        return cls(**data)


def micro_decoder(in_dims=(8, 16, 32, 64), **kw) -> FPTConfig:
    """Toy-scale decoder; stride-32 maps are 1x1 at 32^2 inputs, hence no SR there."""
    base = dict(in_dims=in_dims, embed_dim=8, head_dim=4, num_classes=2,
                sr_ratios={32: 1, 16: 2, 8: 2})
    base.update(kw)
    return FPTConfig(**base)


class Lateral(Module):
    def __init__(self, d_in: int, d_out: int, rng):
        self.proj = Linear(d_in, d_out, rng)
        self.norm = LayerNorm(d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.proj(x))


def lateral_project(f: Tensor, lateral: Lateral) -> Tensor:
    return lateral(f)


def top_down_merge(coarser: Tensor, finer: Tensor) -> Tensor:
    """``up2(coarser) + finer`` for maps whose extents differ by exactly 2x."""
    b, h, w, c = finer.shape
    if coarser.shape != (b, h // 2, w // 2, c) or h % 2 or w % 2:
        raise LayoutError(f"top-down merge needs coarser {coarser.shape} at half the "
                          f"resolution of finer {finer.shape}")
    return add(F.bilinear_upsample(coarser, 2), finer)


def sr_block(cfg: FPTConfig, ratio: int, rng) -> TransformerBlock:
    return TransformerBlock(cfg.embed_dim, SRMSA(cfg.attention_spec(), ratio, rng), cfg.mlp_ratio, rng)


class Branch(Module):
    """Refinement pipeline of one pyramid level down to stride 4."""

    def __init__(self, cfg: FPTConfig, stage: int, rng):
        self.plan = cfg.branch_plan(stage)
        self.blocks = [sr_block(cfg, cfg.sr_ratios[s], rng) for kind, s in self.plan if kind == "block"]

    def forward(self, x: Tensor) -> Tensor:
        blocks = iter(self.blocks)
        for kind, _ in self.plan:
            x = next(blocks)(x) if kind == "block" else F.bilinear_upsample(x, 2)
        return x


def refine_branch(merged: Tensor, branch: Branch) -> Tensor:
    return branch(merged)


def fuse_branches(branches, mode: str = "sum", projection: Linear | None = None) -> Tensor:
    branches = list(branches)
    shape = branches[0].shape
    if any(b.shape != shape for b in branches):
        raise LayoutError(f"branch shapes differ: {[b.shape for b in branches]}")
    if mode == "sum":
        out = branches[0]
        for b in branches[1:]:
            out = add(out, b)
        return out
    if mode == "concat":
        if projection is None:
            raise ParameterError("concat fusion needs a projection back to D")
        return projection(concat(branches, axis=-1))
    raise ParameterError(f"unknown fusion mode {mode!r}")


class SegHead(Module):
    """Per-token linear classifier followed by x4 bilinear upsampling."""

    def __init__(self, dim: int, num_classes: int, rng, upsample: int = 4):
        self.proj = Linear(dim, num_classes, rng)
        self.upsample = upsample

    def forward(self, x: Tensor) -> Tensor:
        return F.bilinear_upsample(self.proj(x), self.upsample)


def seg_head(fused: Tensor, head: SegHead) -> Tensor:
    return head(fused)


def predict_labels(logits) -> np.ndarray:
    """Per-pixel argmax; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=-1)


@dataclass
class DecoderOutput:
    logits: Tensor
    branches: list[Tensor]
    aux_logits: list[Tensor] | None = None


class FeaturePyramidTransformer(Module):
    def __init__(self, cfg: FPTConfig, rng: np.random.Generator):
        self.config = cfg
        d = cfg.embed_dim
        self.laterals = [Lateral(c, d, rng) for c in cfg.in_dims]
        self.branches = [Branch(cfg, i, rng) for i in range(4)]
        self.fuse_proj = Linear(4 * d, d, rng) if cfg.fusion == "concat" else None
        self.head = SegHead(d, cfg.num_classes, rng)
        self.aux_heads = [SegHead(d, cfg.num_classes, rng) for _ in range(4)] if cfg.aux else []

    def inference_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("aux_heads.")]

    def merge(self, pyramid: FeaturePyramid) -> list[Tensor]:
        lats = [lat(f) for lat, f in zip(self.laterals, pyramid.features)]
        merged = [None] * 4
        merged[3] = lats[3]
        for i in (2, 1, 0):
            merged[i] = top_down_merge(merged[i + 1], lats[i])
        return merged

    def forward(self, pyramid: FeaturePyramid, with_aux: bool = False) -> DecoderOutput:
        if len(pyramid) != 4:
            raise LayoutError(f"decoder needs four pyramid levels, got {len(pyramid)}")
        for f, c in zip(pyramid.features, self.config.in_dims):
            if f.shape[-1] != c:
                raise LayoutError(f"pyramid level dim {f.shape[-1]} != decoder in_dim {c}")
        b, h, w, _ = pyramid[0].shape
        self.config.check_geometry(h * 4, w * 4)
        merged = self.merge(pyramid)
        outs = [refine_branch(m, br) for m, br in zip(merged, self.branches)]
        fused = fuse_branches(outs, self.config.fusion, self.fuse_proj)
        logits = seg_head(fused, self.head)
        aux = None
        if with_aux:
            if not self.aux_heads:
                raise ConfigError("decoder was built without auxiliary heads")
            aux = aux_heads(outs, self.aux_heads)
        return DecoderOutput(logits, outs, aux)


def aux_heads(branches, heads) -> list[Tensor]:
    return [head(b) for head, b in zip(heads, branches)]
