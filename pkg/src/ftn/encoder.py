"""Pyramid Group Transformer encoder.

Four stages; each starts with a patch transform (4x4 patch embedding for
stage 1, 2x2 merge elsewhere) followed by pre-norm blocks whose attention is
restricted to a per-stage number of spatial groups.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np

from .attention import PEG, PGMSA, AttentionSpec, GridLayout, isqrt_exact
from .errors import ConfigError, LayoutError, ParameterError
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Tensor, add, mean_over, mul, permute, reshape

STRIDES = (4, 8, 16, 32)
PUBLISHED_GROUPS = (64, 16, 1, 1)
PUBLISHED_HEAD_DIM = 32
PUBLISHED_MLP_RATIO = 4
PUBLISHED_PATCH_SIZES = (4, 2, 2, 2)


@dataclass(frozen=True)
class PGTConfig:
    """Per-stage encoder hyperparameters.

    ``patch_sizes`` are the P_i (tokens shrink by P_i^2), ``dims`` the C_i,
    ``depths`` the N_i, ``groups`` the G_i, ``heads`` the H_i and
    ``mlp_ratios`` the E_i. ``num_classes`` sizes the pooled classification
    head; 0 builds the encoder without one.
    """

    dims: tuple[int, ...]
    depths: tuple[int, ...]
    heads: tuple[int, ...]
    groups: tuple[int, ...] = PUBLISHED_GROUPS
    mlp_ratios: tuple[int, ...] = (4, 4, 4, 4)
    patch_sizes: tuple[int, ...] = PUBLISHED_PATCH_SIZES
    num_classes: int = 1000
    drop_path: float = 0.0
    name: str = ""

    def __post_init__(self):
        for key in ("dims", "depths", "heads", "groups", "mlp_ratios", "patch_sizes"):
            object.__setattr__(self, key, tuple(int(v) for v in getattr(self, key)))
        self.validate()

    @classmethod
    def from_base(cls, embed_dim: int, depths, head_dim: int = PUBLISHED_HEAD_DIM,
                  groups=PUBLISHED_GROUPS, mlp_ratio: int = PUBLISHED_MLP_RATIO, **kw) -> "PGTConfig":
        dims = tuple(embed_dim * 2 ** i for i in range(4))
        if any(d % head_dim for d in dims):
            raise ConfigError(f"stage dims {dims} are not multiples of head dim {head_dim}")
        return cls(dims=dims, depths=tuple(depths), heads=tuple(d // head_dim for d in dims),
                   groups=tuple(groups), mlp_ratios=(mlp_ratio,) * 4, **kw)

    @property
    def embed_dim(self) -> int:
        return self.dims[0]

    @property
    def head_dim(self) -> int:
        return self.dims[0] // self.heads[0]

    def attention_spec(self, stage: int) -> AttentionSpec:
        return AttentionSpec(heads=self.heads[stage], head_dim=self.dims[stage] // self.heads[stage],
                             groups=self.groups[stage])

    def validate(self, strict: bool = False) -> None:
        """Check structural invariants; ``strict`` adds the published-variant rules."""
        if not all(len(getattr(self, k)) == 4 for k in
                   ("dims", "depths", "heads", "groups", "mlp_ratios", "patch_sizes")):
            raise ConfigError("every per-stage field needs exactly four entries")
        if min(self.dims) < 1 or min(self.heads) < 1 or min(self.depths) < 0:
            raise ConfigError(f"non-positive dims/heads or negative depth in {self}")
        for i in range(1, 4):
            if self.dims[i] != 2 * self.dims[i - 1]:
                raise ConfigError(f"stage dims must double: got {self.dims}")
        head_dims = {d // h for d, h in zip(self.dims, self.heads)}
        if any(d % h for d, h in zip(self.dims, self.heads)) or len(head_dims) != 1:
            raise ConfigError(f"dims {self.dims} and heads {self.heads} need one common head dim")
        for g in self.groups:
            try:
                isqrt_exact(g)
            except LayoutError as exc:
                raise ConfigError(str(exc)) from None
        if min(self.mlp_ratios) < 1 or min(self.patch_sizes) < 1:
            raise ConfigError("mlp ratios and patch sizes must be positive")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError(f"drop_path must be in [0, 1), got {self.drop_path}")
        if strict:
            problems = []
            if self.head_dim != PUBLISHED_HEAD_DIM:
                problems.append(f"head dim {self.head_dim} != {PUBLISHED_HEAD_DIM}")
            if set(self.mlp_ratios) != {PUBLISHED_MLP_RATIO}:
                problems.append(f"mlp ratios {self.mlp_ratios} != 4")
            if self.groups != PUBLISHED_GROUPS:
                problems.append(f"groups {self.groups} != {PUBLISHED_GROUPS}")
            if self.patch_sizes != PUBLISHED_PATCH_SIZES:
                problems.append(f"patch sizes {self.patch_sizes} != {PUBLISHED_PATCH_SIZES}")
            if problems:
                raise ConfigError("; ".join(problems))

    def stage_strides(self) -> tuple[int, ...]:
        return tuple(int(np.prod(self.patch_sizes[: i + 1])) for i in range(4))

    def check_geometry(self, height: int, width: int) -> None:
        h, w = height, width
        for i, p in enumerate(self.patch_sizes):
            if h % p or w % p:
                raise LayoutError(f"stage {i + 1}: {h}x{w} map not divisible by patch size {p}")
            h, w = h // p, w // p
            try:
                GridLayout.of((1, h, w), self.groups[i])
            except LayoutError as exc:
                raise LayoutError(f"stage {i + 1}: {exc}") from None

    def stage_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        """(H_i, W_i, C_i) of each stage output."""
        self.check_geometry(height, width)
        return [(height // s, width // s, c) for s, c in zip(self.stage_strides(), self.dims)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PGTConfig":
        return cls(**data)


def micro_config(**overrides) -> PGTConfig:
    """A <100k-parameter encoder for gradient checks and toy training."""
    base = PGTConfig.from_base(8, (1, 1, 1, 1), head_dim=8, groups=(4, 4, 1, 1),
                               num_classes=0, name="micro")
    return replace(base, **overrides) if overrides else base


def _load_variants() -> dict[str, PGTConfig]:
    text = resources.files("ftn").joinpath("variants.json").read_text()
    return {k: PGTConfig.from_dict(v) for k, v in json.loads(text).items()}


def variant(name: str) -> PGTConfig:
    """The frozen PGT-T/S/B/L configuration."""
    key = name.upper().removeprefix("PGT-")
    variants = _load_variants()
    if key not in variants:
        raise ParameterError(f"unknown variant {name!r}; choose from {', '.join(variants)}")
    return variants[key]


# ---------------------------------------------------------------- layers

class PatchEmbed(Module):
    """Flatten each PxPx3 patch, project to C, layer-normalize."""

    def __init__(self, in_chans: int, dim: int, patch: int, rng):
        self.patch = patch
        self.proj = Linear(patch * patch * in_chans, dim, rng)
        self.norm = LayerNorm(dim)

    def forward(self, img: Tensor) -> Tensor:
        return self.norm(self.proj(_gather_cells(img, self.patch)))


class PatchMerge(Module):
    """Concatenate each PxP cell, layer-normalize, project to the next dim."""

    def __init__(self, dim: int, out_dim: int, patch: int, rng):
        self.patch = patch
        self.norm = LayerNorm(patch * patch * dim)
        self.proj = Linear(patch * patch * dim, out_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.norm(_gather_cells(x, self.patch)))


def _gather_cells(x: Tensor, p: int) -> Tensor:
    b, h, w, c = x.shape
    if h % p or w % p:
        raise LayoutError(f"{h}x{w} map is not divisible into {p}x{p} cells")
    t = reshape(x, (b, h // p, p, w // p, p, c))
    t = permute(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b, h // p, w // p, p * p * c))


class DropPath(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        self.rate = rate
        self.rng = rng
        self.training = False

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        keep = 1.0 - self.rate
        mask = (self.rng.random((x.shape[0],) + (1,) * (x.ndim - 1)) < keep) / keep
        return mul(x, mask.astype(x.dtype))


class TransformerBlock(Module):
    """Pre-norm residual pair: ``x + attn(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, dim: int, attention: Module, mlp_ratio: int, rng, drop_path: float = 0.0):
        self.norm1 = LayerNorm(dim)
        self.attn = attention
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio, rng)
        self.drop = DropPath(drop_path, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = add(x, self.drop(self.attn(self.norm1(x))))
        return add(x, self.drop(self.mlp(self.norm2(x))))


def pgt_block(dim: int, spec: AttentionSpec, mlp_ratio: int, rng, drop_path: float = 0.0):
    return TransformerBlock(dim, PGMSA(spec, rng), mlp_ratio, rng, drop_path)


@dataclass
class FeaturePyramid:
    features: list[Tensor]
    strides: tuple[int, ...] = field(default=STRIDES)

    def __getitem__(self, i: int) -> Tensor:
        return self.features[i]

    def __len__(self):
        return len(self.features)

    def token_counts(self) -> list[int]:
        return [f.shape[1] * f.shape[2] for f in self.features]


class Stage(Module):
    def __init__(self, cfg: PGTConfig, i: int, rng, drop_rates):
        in_dim = 3 if i == 0 else cfg.dims[i - 1]
        if i == 0:
            self.patch = PatchEmbed(in_dim, cfg.dims[0], cfg.patch_sizes[0], rng)
        else:
            self.patch = PatchMerge(in_dim, cfg.dims[i], cfg.patch_sizes[i], rng)
        spec = cfg.attention_spec(i)
        self.blocks = [pgt_block(cfg.dims[i], spec, cfg.mlp_ratios[i], rng, r) for r in drop_rates]
        self.peg = PEG(cfg.dims[i], rng) if cfg.depths[i] > 0 else None

    def forward(self, x: Tensor) -> Tensor:
        x = self.patch(x)
        for j, block in enumerate(self.blocks):
            x = block(x)
            if j == 0:
                x = self.peg(x)
        return x


class PyramidGroupTransformer(Module):
    def __init__(self, cfg: PGTConfig, rng: np.random.Generator):
        self.config = cfg
        total = sum(cfg.depths)
        rates = list(np.linspace(0.0, cfg.drop_path, total)) if total else []
        self.stages = []
        start = 0
        for i in range(4):
            self.stages.append(Stage(cfg, i, rng, rates[start:start + cfg.depths[i]]))
            start += cfg.depths[i]
        self.head = Linear(cfg.dims[3], cfg.num_classes, rng) if cfg.num_classes else None

    def set_training(self, flag: bool) -> None:
        for stage in self.stages:
            for block in stage.blocks:
                block.drop.training = flag

    def forward(self, img: Tensor) -> FeaturePyramid:
        if img.ndim != 4 or img.shape[3] != 3:
            raise LayoutError(f"encoder expects [B,H,W,3] images, got {img.shape}")
        self.config.check_geometry(img.shape[1], img.shape[2])
        feats = []
        x = img
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(feats, self.config.stage_strides())

    def classify(self, pyramid: FeaturePyramid) -> Tensor:
        if self.head is None:
            raise ConfigError("encoder was built without a classification head (num_classes=0)")
        return classification_head(pyramid[3], self.head)


def run_encoder(img: Tensor, encoder: PyramidGroupTransformer) -> FeaturePyramid:
    return encoder(img)


def classification_head(f4: Tensor, head: Linear) -> Tensor:
    """Average-pool all stage-4 tokens, then a linear classifier."""
    return head(mean_over(f4, (1, 2)))
