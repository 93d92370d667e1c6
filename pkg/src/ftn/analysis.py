"""Analytic parameter and multiply-accumulate accounting, and variant search.

MACs are reported as FLOPs (1 MAC = 1 FLOP), the convention under which
published backbone budgets are usually quoted. Normalization, softmax,
GELU and bilinear upsampling are not counted.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

from .decoder import FPTConfig
from .encoder import PGTConfig
from .errors import ConfigError, DerivationError

# Published encoder budgets: (parameters, GFLOPs at 224x224).
PUBLISHED_BUDGETS = {
    "T": (13e6, 2.1),
    "S": (28e6, 4.6),
    "B": (50e6, 9.1),
    "L": (88e6, 15.9),
}
PARAM_TOLERANCE = 0.05
FLOP_TOLERANCE = 0.15
EXCLUDED_OPS = "layer norm, softmax, GELU and bilinear upsampling are excluded from MACs"


@dataclass
class CostRow:
    name: str
    params: int
    macs: int = 0
    group: str = "encoder"


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    geometry: tuple[int, int] | None = None
    notes: list[str] = field(default_factory=lambda: [EXCLUDED_OPS])

    def add(self, name, params, macs=0, group="encoder"):
        self.rows.append(CostRow(name, int(params), int(macs), group))

    def select(self, *groups) -> list[CostRow]:
        return [r for r in self.rows if r.group in groups]

    def params(self, *groups) -> int:
        rows = self.select(*groups) if groups else self.rows
        return sum(r.params for r in rows)

    def macs(self, *groups) -> int:
        rows = self.select(*groups) if groups else self.rows
        return sum(r.macs for r in rows)

    @property
    def total_params(self) -> int:
        return self.params()

    @property
    def total_macs(self) -> int:
        return self.macs()

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    def to_rows(self):
        """Flat rows for CSV output: layers, the totals, then footnotes."""
        out = [(r.group, r.name, r.params, r.macs) for r in self.rows]
        out.append(("total", "", self.total_params, self.total_macs))
        out += [("note", text, "", "") for text in self.notes]
        return out


def linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def norm_params(dim: int) -> int:
    return 2 * dim


def attention_params(dim: int, qkv_bias: bool = True) -> int:
    return 3 * linear_params(dim, dim, qkv_bias) + linear_params(dim, dim)


def mlp_params(dim: int, ratio: int) -> int:
    return linear_params(dim, dim * ratio) + linear_params(dim * ratio, dim)


def pgt_block_params(dim: int, ratio: int) -> int:
    return 2 * norm_params(dim) + attention_params(dim) + mlp_params(dim, ratio)


def pg_msa_macs(tokens: int, dim: int, groups: int) -> tuple[int, int]:
    """(projection MACs, score + weighted-sum MACs) of one grouped attention layer."""
    return 4 * tokens * dim * dim, 2 * tokens * tokens * dim // groups


def _encoder_rows(rep: CostReport, cfg: PGTConfig, hw: tuple[int, int] | None, prefix: str = ""):
    h, w = hw if hw else (0, 0)
    if hw:
        cfg.check_geometry(h, w)
    strides = cfg.stage_strides()
    for i in range(4):
        c, p = cfg.dims[i], cfg.patch_sizes[i]
        n = (h // strides[i]) * (w // strides[i])
        base = f"{prefix}stages.{i}"
        if i == 0:
            rep.add(f"{base}.patch", linear_params(p * p * 3, c) + norm_params(c), n * p * p * 3 * c)
        else:
            cin = cfg.dims[i - 1] * p * p
            rep.add(f"{base}.patch", norm_params(cin) + linear_params(cin, c), n * cin * c)
        e = cfg.mlp_ratios[i]
        for j in range(cfg.depths[i]):
            proj, attn = pg_msa_macs(n, c, cfg.groups[i])
            rep.add(f"{base}.blocks.{j}", pgt_block_params(c, e), proj + attn + 2 * e * n * c * c)
        if cfg.depths[i]:
            rep.add(f"{base}.peg", 10 * c, 9 * n * c)
    if cfg.num_classes:
        rep.add(f"{prefix}head", linear_params(cfg.dims[3], cfg.num_classes),
                cfg.dims[3] * cfg.num_classes if hw else 0)


def sr_block_params(dim: int, ratio: int, mlp_ratio: int) -> int:
    sr = linear_params(ratio * ratio * dim, dim) + norm_params(dim) if ratio > 1 else 0
    return 2 * norm_params(dim) + attention_params(dim) + sr + mlp_params(dim, mlp_ratio)


def sr_block_macs(tokens: int, dim: int, ratio: int, mlp_ratio: int) -> int:
    kv = tokens // (ratio * ratio)
    macs = 2 * tokens * dim * dim + 2 * kv * dim * dim     # q, out; k, v
    if ratio > 1:
        macs += kv * ratio * ratio * dim * dim             # cell merge projection
    macs += 2 * tokens * kv * dim                          # scores + weighted sum
    return macs + 2 * mlp_ratio * tokens * dim * dim


def _decoder_rows(rep: CostReport, cfg: FPTConfig, hw: tuple[int, int] | None, prefix: str = ""):
    h, w = hw if hw else (0, 0)
    d, k = cfg.embed_dim, cfg.num_classes
    tokens = lambda s: (h // s) * (w // s)  # noqa: E731
    for i, c in enumerate(cfg.in_dims):
        rep.add(f"{prefix}laterals.{i}", linear_params(c, d) + norm_params(d),
                tokens(4 * 2 ** i) * c * d, "decoder")
    for i in range(4):
        j = 0
        for kind, s in cfg.branch_plan(i):
            if kind != "block":
                continue
            r = cfg.sr_ratios[s]
            rep.add(f"{prefix}branches.{i}.blocks.{j}", sr_block_params(d, r, cfg.mlp_ratio),
                    sr_block_macs(tokens(s), d, r, cfg.mlp_ratio), "decoder")
            j += 1
    if cfg.fusion == "concat":
        rep.add(f"{prefix}fuse_proj", linear_params(4 * d, d), tokens(4) * 4 * d * d, "decoder")
    rep.add(f"{prefix}head", linear_params(d, k), tokens(4) * d * k, "decoder")
    if cfg.aux:
        for i in range(4):
            rep.add(f"{prefix}aux_heads.{i}", linear_params(d, k), tokens(4) * d * k, "aux")


def count_params(encoder: PGTConfig, decoder: FPTConfig | None = None) -> CostReport:
    """Exact parameter tally derived from the configs alone."""
    if decoder is not None and tuple(decoder.in_dims) != tuple(encoder.dims):
        raise ConfigError(f"decoder in_dims {decoder.in_dims} != encoder dims {encoder.dims}")
    rep = CostReport()
    _encoder_rows(rep, encoder, None, "encoder." if decoder is not None else "")
    if decoder is not None:
        _decoder_rows(rep, decoder, None, "decoder.")
    return rep


def estimate_flops(encoder: PGTConfig, size=(224, 224), decoder: FPTConfig | None = None) -> CostReport:
    """Per-layer parameters and MACs for one image of ``size``."""
    hw = (int(size[0]), int(size[1]))
    rep = CostReport(geometry=hw)
    _encoder_rows(rep, encoder, hw, "encoder." if decoder is not None else "")
    if decoder is not None:
        decoder.check_geometry(*hw)
        _decoder_rows(rep, decoder, hw, "decoder.")
    return rep


# ---------------------------------------------------------------- variant search

@dataclass
class Candidate:
    config: PGTConfig
    params: int
    gflops: float
    budget: tuple[float, float]

    @property
    def param_miss(self) -> float:
        return abs(self.params - self.budget[0]) / self.budget[0]

    @property
    def flop_miss(self) -> float:
        return abs(self.gflops - self.budget[1]) / self.budget[1]

    @property
    def score(self) -> float:
        return max(self.param_miss, self.flop_miss)


def search_space(c1_choices=(64, 96, 128), n3_range=range(2, 19), n_other=range(1, 4)):
    for c1, n3 in itertools.product(c1_choices, n3_range):
        for n1, n2, n4 in itertools.product(n_other, repeat=3):
            yield c1, (n1, n2, n3, n4)


def _misses(table, budget):
    p0, f0 = budget
    return {key: max(abs(p - p0) / p0, abs(f - f0) / f0) for key, (p, f) in table.items()}


def derive_variants(budgets=None, tolerance: float = PARAM_TOLERANCE,
                    c1_choices=(64, 96, 128), n3_range=range(2, 19), n_other=range(1, 4),
                    size=(224, 224)) -> dict[str, PGTConfig]:
    """Choose T/S/B/L stage widths and depths against (params, GFLOPs) budgets.

    Every candidate honours head dim 32, MLP ratio 4, channel doubling and
    groups 64-16-1-1. The four variants are chosen jointly as one family:
    S shares T's depths with a wider C1, B shares S's width and is deeper
    (no stage shallower, at least one stage deeper), and L is wider than B
    with no stage shallower. Among families the one with the
    smallest worst-case relative miss (over both budgets and all variants)
    wins; ties go to the smaller summed miss. Raises DerivationError if any
    chosen variant misses its parameter budget by more than ``tolerance``.
    """
    budgets = dict(budgets or PUBLISHED_BUDGETS)
    if set(budgets) != {"T", "S", "B", "L"}:
        raise ConfigError(f"budgets must name T, S, B and L, got {sorted(budgets)}")
    table = {}
    for c1, depths in search_space(c1_choices, n3_range, n_other):
        cfg = PGTConfig.from_base(c1, depths)
        table[(c1, depths)] = (count_params(cfg).total_params, estimate_flops(cfg, size).gflops)
    miss = {name: _misses(table, b) for name, b in budgets.items()}
    depth_list = sorted({d for _, d in table})
    widths = sorted(set(c1_choices))

    def dominates(a, b):
        return all(x >= y for x, y in zip(a, b))

    # Best L at each width among depth vectors dominating d.
    best_l = {}
    for c in widths:
        for d in depth_list:
            opts = [(miss["L"][(c, d3)], d3) for d3 in depth_list if dominates(d3, d)]
            best_l[(c, d)] = min(opts)

    def best_b_l(c_s, d1):
        best = None
        for d2 in depth_list:
            if d2 == d1 or not dominates(d2, d1):
                continue
            mb = miss["B"][(c_s, d2)]
            for c_l in widths:
                if c_l <= c_s:
                    continue
                ml, d3 = best_l[(c_l, d2)]
                key = (max(mb, ml), mb + ml)
                if best is None or key < best[0]:
                    best = (key, d2, c_l, d3)
        return best

    cache, best = {}, None
    for c_t, c_s in itertools.combinations(widths, 2):
        for d1 in depth_list:
            if (c_s, d1) not in cache:
                cache[(c_s, d1)] = best_b_l(c_s, d1)
            tail = cache[(c_s, d1)]
            if tail is None:
                continue
            mt, ms = miss["T"][(c_t, d1)], miss["S"][(c_s, d1)]
            key = (max(mt, ms, tail[0][0]), mt + ms + tail[0][1])
            if best is None or key < best[0]:
                best = (key, {"T": (c_t, d1), "S": (c_s, d1), "B": (c_s, tail[1]), "L": (tail[2], tail[3])})
    if best is None:
        raise DerivationError("search space admits no T/S/B/L family")

    chosen = {}
    for name in ("T", "S", "B", "L"):
        c1, depths = best[1][name]
        cand = Candidate(PGTConfig.from_base(c1, depths), *table[(c1, depths)], budgets[name])
        if cand.param_miss > tolerance:
            near = sorted(table, key=lambda k: abs(table[k][0] - budgets[name][0]))[:3]
            listing = ", ".join(f"C1={c} N={d} ({table[(c, d)][0] / 1e6:.2f}M)" for c, d in near)
            raise DerivationError(f"{name}: best family member misses {budgets[name][0] / 1e6:.0f}M "
                                  f"by {cand.param_miss:.1%}; nearest by params: {listing}")
        chosen[name] = replace(cand.config, name=f"PGT-{name}")
    return chosen
