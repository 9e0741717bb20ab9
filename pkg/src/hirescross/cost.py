"""Analytical compute model for the cross-attention design.

Two accounting modes live here and are kept apart on purpose:

* normalized attention complexity (all constants 1), used for the
  reduction-factor algebra;
* absolute FLOPs (one multiply-add = 2 FLOPs; softmax = 5 FLOPs per score),
  used for whole-model estimates, resolution sweeps and the comparison
  against the kernels' own FLOP counters.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

SOFTMAX_FLOPS = 5


@dataclass(frozen=True)
class AttnCostInputs:
    l_lo: int
    l_hi: int
    l_t: int
    h_cross: int = 32
    d_cross: int = 32
    h_dec: int = 32
    d_dec: int = 128

    @property
    def head_ratio(self) -> float:
        """H_dec·d_dec / (H_cross·d_cross)"""
        return (self.h_dec * self.d_dec) / (self.h_cross * self.d_cross)


@dataclass(frozen=True)
class CostReport:
    t_improved: float
    t_original: float
    reduction_factor: float
    lower_bound: float
    case1_approx: float
    case1_with_heads: float

    @property
    def exceeds_lower_bound(self) -> bool:
        return self.reduction_factor >= self.lower_bound


def attn_flops_improved(c: AttnCostInputs) -> float:
    """(L_lo + L_T)·L_hi·H_cross·d_cross + (L_lo + L_T)²·H_dec·d_dec"""
    n = c.l_lo + c.l_t
    return float(n * c.l_hi * c.h_cross * c.d_cross + n * n * c.h_dec * c.d_dec)


def attn_flops_original(c: AttnCostInputs) -> float:
    """(L_hi + L_T)²·H_dec·d_dec"""
    n = c.l_hi + c.l_t
    return float(n * n * c.h_dec * c.d_dec)


def reduction_factor(c: AttnCostInputs) -> CostReport:
    """T_original / T_improved through the factorized form.

    exact = (L_hi+L_T)/(L_lo+L_T) · (L_hi+L_T)·r / (L_hi + (L_lo+L_T)·r),
    r = H_dec·d_dec / (H_cross·d_cross).  The first factor is the quoted
    lower bound; the second factor is >= 1 exactly when
    L_hi·(r - 1) >= L_lo·r (see :func:`lower_bound_holds`).

    ``case1_approx`` is L_hi/(L_lo+L_T), the small-L_lo, small-L_T limit
    when r = 1; for general r the same limit is r·L_hi/(L_lo+L_T)
    (``case1_with_heads``).
    """
    n_lo = c.l_lo + c.l_t
    n_hi = c.l_hi + c.l_t
    if n_lo <= 0 or n_hi <= 0:
        raise ValueError("reduction factor undefined for empty sequences")
    r = c.head_ratio
    lower = n_hi / n_lo
    exact = lower * (n_hi * r) / (c.l_hi + n_lo * r)
    return CostReport(
        t_improved=attn_flops_improved(c),
        t_original=attn_flops_original(c),
        reduction_factor=exact,
        lower_bound=lower,
        case1_approx=c.l_hi / n_lo,
        case1_with_heads=r * c.l_hi / n_lo,
    )


def lower_bound_holds(c: AttnCostInputs) -> bool:
    """Closed-form condition under which exact >= (L_hi+L_T)/(L_lo+L_T)."""
    return c.l_hi * (c.h_dec * c.d_dec - c.h_cross * c.d_cross) >= c.l_lo * c.h_dec * c.d_dec


# ---------------------------------------------------------------------------
# whole-model specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderSpec:
    side: int
    patch: int
    layers: int
    hidden: int
    heads: int
    mlp_hidden: int
    channels: int = 3
    gated: bool = False

    @property
    def tokens(self) -> int:
        return (self.side // self.patch) ** 2

    def at(self, side: int) -> "EncoderSpec":
        return replace(self, side=side)


@dataclass(frozen=True)
class DecoderSpec:
    layers: int
    hidden: int
    heads: int
    ffn_hidden: int
    vocab: int
    ffn_gated: bool = False
    ffn_bias: bool = True
    positions: int = 0       # learned position table rows; 0 for rotary models
    visual_expert: bool = True


@dataclass(frozen=True)
class CrossSpec:
    hidden: int
    heads: int


@dataclass(frozen=True)
class ModelSpec:
    lo: EncoderSpec
    hi: EncoderSpec
    decoder: DecoderSpec
    cross: CrossSpec
    # Whether encoder QKᵀ / softmax / AV FLOPs enter model_flops.  Off for the
    # full-scale reproduction: the published ablation FLOPs grow linearly in
    # high-res patches, which only fits matmul-only accounting of encoders.
    count_encoder_attention: bool = False

    @classmethod
    def from_model_config(cls, cfg) -> "ModelSpec":
        """Spec that describes a :class:`hirescross.decoder.ModelConfig` exactly."""
        d = cfg.dec

        def enc(e):
            return EncoderSpec(e.side, e.patch, e.layers, e.hidden, e.heads, e.mlp_ratio * e.hidden, e.channels)

        return cls(
            lo=enc(cfg.lo),
            hi=enc(cfg.hi),
            decoder=DecoderSpec(
                layers=d.layers,
                hidden=d.hidden,
                heads=d.heads,
                ffn_hidden=d.mlp_ratio * d.hidden,
                vocab=d.vocab,
                positions=cfg.lo.tokens + d.max_text,
            ),
            cross=CrossSpec(d.cross_hidden, d.cross_heads) if d.use_cross else CrossSpec(0, 1),
            count_encoder_attention=True,
        )


# Full-scale reference: 32-layer 4096-wide decoder with visual expert,
# a 4.4B-class low-res ViT at 224 and a 0.30B-class high-res ViT at 1120,
# cross hidden 1,024 with 32 heads.  Encoder widths/depths are standard ViT
# shapes chosen to land on those parameter totals.
FULL_SPEC = ModelSpec(
    lo=EncoderSpec(side=224, patch=14, layers=64, hidden=1792, heads=16, mlp_hidden=15360),
    hi=EncoderSpec(side=1120, patch=14, layers=24, hidden=1024, heads=16, mlp_hidden=4096),
    decoder=DecoderSpec(
        layers=32, hidden=4096, heads=32, ffn_hidden=11008, vocab=32000,
        ffn_gated=True, ffn_bias=False, positions=0,
    ),
    cross=CrossSpec(hidden=1024, heads=32),
)


# ---------------------------------------------------------------------------
# parameter counts
# ---------------------------------------------------------------------------


def encoder_params(e: EncoderSpec) -> int:
    h, m = e.hidden, e.mlp_hidden
    patch_dim = e.patch * e.patch * e.channels
    ffn = 3 * h * m if e.gated else 2 * h * m + m + h
    block = 4 * h + 4 * h * h + ffn
    return patch_dim * h + h + e.tokens * h + e.layers * block + (2 * h if e.layers else 0)


def _ffn_params(d: DecoderSpec) -> int:
    D, F = d.hidden, d.ffn_hidden
    mats = (3 if d.ffn_gated else 2) * D * F
    return mats + (F + D if d.ffn_bias else 0)


def cross_layer_params(spec: ModelSpec) -> int:
    """W_Q [D_dec×D_cross] + W_K, W_V [D_hi×D_cross] + W_O [D_cross×D_dec] + query norm."""
    D, C, Dhi = spec.decoder.hidden, spec.cross.hidden, spec.hi.hidden
    if C == 0:
        return 0
    return D * C + 2 * Dhi * C + C * D + 2 * D


@dataclass
class ParamReport:
    groups: dict[str, int]
    total: int
    phase1_trainable: int
    phase2_trainable: int

    @property
    def phase1_fraction(self) -> float:
        return self.phase1_trainable / self.total

    @property
    def phase2_fraction(self) -> float:
        return self.phase2_trainable / self.total


def param_count(spec: ModelSpec) -> ParamReport:
    d = spec.decoder
    D = d.hidden
    base = encoder_params(spec.lo) + spec.lo.hidden * D + D
    base += d.vocab * D + d.positions * D
    base += d.layers * (4 * D + 4 * D * D + _ffn_params(d))
    base += 2 * D + D * d.vocab
    expert = d.layers * (3 * D * D + _ffn_params(d)) if d.visual_expert else 0
    cross = 0
    if spec.cross.hidden:
        cross = encoder_params(spec.hi) + d.layers * cross_layer_params(spec)
    groups = {"cross_module": cross, "visual_expert": expert, "base": base}
    total = sum(groups.values())
    return ParamReport(groups, total, phase1_trainable=cross, phase2_trainable=cross + expert)


# ---------------------------------------------------------------------------
# absolute FLOPs
# ---------------------------------------------------------------------------


def attention_core_flops(lq: int, lk: int, heads: int, head_dim: int) -> int:
    """QKᵀ + softmax + AV for one attention call (all heads, one batch row)."""
    return heads * (4 * lq * lk * head_dim + SOFTMAX_FLOPS * lq * lk)


def encoder_flops(e: EncoderSpec, count_attention: bool = True) -> dict[str, float]:
    L, h, m = e.tokens, e.hidden, e.mlp_hidden
    patch_dim = e.patch * e.patch * e.channels
    ffn = (3 if e.gated else 2) * h * m
    out = {
        "patch_embed": 2.0 * L * patch_dim * h,
        "projections": 2.0 * e.layers * L * 4 * h * h,
        "ffn": 2.0 * e.layers * L * ffn,
        "attention": float(e.layers * attention_core_flops(L, L, e.heads, h // e.heads)) if count_attention else 0.0,
    }
    return out


@dataclass
class FlopsEstimate:
    tflops: float
    sheet: dict[str, float] = field(default_factory=dict)  # FLOPs per line item

    def render(self) -> str:
        width = max(len(k) for k in self.sheet)
        lines = [f"{k:<{width}}  {v / 1e12:12.4f} TFLOPs" for k, v in self.sheet.items()]
        lines.append(f"{'total':<{width}}  {self.tflops:12.4f} TFLOPs")
        return "\n".join(lines)


def model_flops(spec: ModelSpec, resolution: int, use_cross: bool, l_t: int, batch: int = 1) -> FlopsEstimate:
    """Forward FLOPs for one pass over ``batch`` samples.

    Without the cross branch ``resolution`` is the low-res encoder input;
    with it, ``resolution`` is the high-res encoder input and the low-res
    branch stays at ``spec.lo.side``.
    """
    d = spec.decoder
    D = d.hidden
    if use_cross:
        lo, hi = spec.lo, spec.hi.at(resolution)
    else:
        lo, hi = spec.lo.at(resolution), None
    if resolution % spec.lo.patch:
        raise ValueError(f"resolution {resolution} not divisible by patch {spec.lo.patch}")
    n = lo.tokens + l_t
    sheet: dict[str, float] = {}
    for k, v in encoder_flops(lo, spec.count_encoder_attention).items():
        sheet[f"lo_encoder.{k}"] = v
    sheet["adapter"] = 2.0 * lo.tokens * lo.hidden * D
    sheet["decoder.projections"] = 2.0 * d.layers * n * 4 * D * D
    sheet["decoder.attention"] = float(d.layers * attention_core_flops(n, n, d.heads, D // d.heads))
    sheet["decoder.ffn"] = 2.0 * d.layers * n * (3 if d.ffn_gated else 2) * D * d.ffn_hidden
    sheet["logits"] = 2.0 * l_t * D * d.vocab
    if hi is not None and hi.tokens > 0 and spec.cross.hidden:
        C, Lhi = spec.cross.hidden, hi.tokens
        for k, v in encoder_flops(hi, spec.count_encoder_attention).items():
            sheet[f"hi_encoder.{k}"] = v
        sheet["cross.q_o_projections"] = 2.0 * d.layers * n * 2 * D * C
        sheet["cross.kv_projections"] = 2.0 * d.layers * Lhi * 2 * hi.hidden * C
        sheet["cross.attention"] = float(d.layers * attention_core_flops(n, Lhi, spec.cross.heads, C // spec.cross.heads))
    sheet = {k: v * batch for k, v in sheet.items()}
    return FlopsEstimate(sum(sheet.values()) / 1e12, sheet)


def attention_flops(spec: ModelSpec, l_t: int, use_cross: bool = True, batch: int = 1) -> float:
    """Absolute FLOPs of every QKᵀ/softmax/AV call in one forward, encoders included."""
    d = spec.decoder
    n = spec.lo.tokens + l_t
    tot = spec.lo.layers * attention_core_flops(spec.lo.tokens, spec.lo.tokens, spec.lo.heads, spec.lo.hidden // spec.lo.heads)
    tot += d.layers * attention_core_flops(n, n, d.heads, d.hidden // d.heads)
    if use_cross:
        hi = spec.hi
        tot += hi.layers * attention_core_flops(hi.tokens, hi.tokens, hi.heads, hi.hidden // hi.heads)
        tot += d.layers * attention_core_flops(n, hi.tokens, spec.cross.heads, spec.cross.hidden // spec.cross.heads)
    return float(tot * batch)


def measure_vs_model(model, l_t: int, batch: int = 1, seed: int = 0) -> dict[str, float]:
    """Run one forward of ``model`` under the kernel FLOP counter and compare
    the measured attention FLOPs with :func:`attention_flops`."""
    from . import numerics as nx

    cfg = model.cfg
    rng = np.random.default_rng(seed)
    lo = rng.random((batch, cfg.lo.tokens, cfg.lo.patch_dim)).astype(model.dtype)
    hi = rng.random((batch, cfg.hi.tokens, cfg.hi.patch_dim)).astype(model.dtype) if cfg.dec.use_cross else None
    ids = rng.integers(0, cfg.dec.vocab, size=(batch, l_t))
    with nx.flop_counter() as counts:
        model.forward(lo, hi, ids)
    spec = ModelSpec.from_model_config(cfg)
    analytical = attention_flops(spec, l_t, cfg.dec.use_cross, batch)
    return {
        "measured_attention": float(counts["attention"]),
        "analytical_attention": analytical,
        "ratio": counts["attention"] / analytical,
        "measured_matmul": float(counts["matmul"]),
    }


# ---------------------------------------------------------------------------
# resolution sweeps
# ---------------------------------------------------------------------------

CSV_FIELDS = ("resolution", "patches", "L_T", "flops_base", "flops_cross", "reduction_exact", "reduction_lower_bound")


@dataclass
class SweepRow:
    resolution: int
    patches: int
    L_T: int
    flops_base: float
    flops_cross: float
    reduction_exact: float
    reduction_lower_bound: float


@dataclass
class SweepResult:
    rows: list[SweepRow]
    cross_linear_r2: float
    base_quadratic_r2: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(asdict(r))
        return buf.getvalue()


def r_squared(x, y, degree: int) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) <= degree:
        return 1.0
    coef = np.polyfit(x, y, degree)
    resid = y - np.polyval(coef, x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 if ss_tot == 0 else 1.0 - float((resid**2).sum()) / ss_tot


def sweep(spec: ModelSpec, resolutions, l_t: int) -> SweepResult:
    """Base vs cross TFLOPs at each resolution, with fit quality of both curves."""
    resolutions = list(resolutions)
    if not resolutions:
        raise ValueError("sweep needs at least one resolution")
    rows = []
    for res in resolutions:
        patches = (res // spec.lo.patch) ** 2
        red = reduction_factor(AttnCostInputs(
            l_lo=spec.lo.tokens, l_hi=patches, l_t=l_t,
            h_cross=spec.cross.heads, d_cross=spec.cross.hidden // spec.cross.heads,
            h_dec=spec.decoder.heads, d_dec=spec.decoder.hidden // spec.decoder.heads,
        ))
        rows.append(SweepRow(
            resolution=res,
            patches=patches,
            L_T=l_t,
            flops_base=model_flops(spec, res, False, l_t).tflops,
            flops_cross=model_flops(spec, res, True, l_t).tflops,
            reduction_exact=red.reduction_factor,
            reduction_lower_bound=red.lower_bound,
        ))
    p = [r.patches for r in rows]
    return SweepResult(
        rows,
        cross_linear_r2=r_squared(p, [r.flops_cross for r in rows], 1),
        base_quadratic_r2=r_squared(p, [r.flops_base for r in rows], 2),
    )


def write_sweep(result: SweepResult, csv_path: str | Path, svg_path: str | Path | None = None) -> None:
    Path(csv_path).write_text(result.to_csv())
    if svg_path is not None:
        Path(svg_path).write_text(sweep_svg(result))


def sweep_svg(result: SweepResult, width: int = 480, height: int = 320) -> str:
    """Line plot of both curves against patch count, log-scaled y axis."""
    pad = 48
    xs = [r.patches for r in result.rows]
    series = {
        "base": ([r.flops_base for r in result.rows], "#d62728"),
        "cross": ([r.flops_cross for r in result.rows], "#1f77b4"),
    }
    ys = [v for vals, _ in series.values() for v in vals]
    lo_y, hi_y = math.log10(min(ys)), math.log10(max(ys))
    if hi_y - lo_y < 1e-9:
        lo_y, hi_y = lo_y - 0.5, hi_y + 0.5
    x0, x1 = min(xs), max(xs)
    span_x = (x1 - x0) or 1

    def px(x):
        return pad + (x - x0) / span_x * (width - 2 * pad)

    def py(y):
        return height - pad - (math.log10(y) - lo_y) / (hi_y - lo_y) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">image patches</text>',
        f'<text x="14" y="{height / 2}" transform="rotate(-90 14 {height / 2})" text-anchor="middle" font-size="12">TFLOPs (log)</text>',
    ]
    for k in range(math.floor(lo_y), math.ceil(hi_y) + 1):
        if lo_y - 1e-9 <= k <= hi_y + 1e-9:
            parts.append(f'<text x="{pad - 4}" y="{py(10.0**k):.1f}" text-anchor="end" font-size="10">1e{k}</text>')
    for i, (label, (vals, color)) in enumerate(series.items()):
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, vals))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, vals):
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" text-anchor="end" font-size="11" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
