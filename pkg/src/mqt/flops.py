"""Closed-form FLOP counts for query transformer + language model pipelines.

All counts are exact Python integers, 2 FLOPs per multiply-accumulate, and
cover matrix products only (norms, softmax and activations are ignored).  The
vision encoder is excluded: its cost does not depend on the token budget.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

ATTN_THEN_PROJ = "attention-then-projection"
PROJ_THEN_ATTN = "projection-then-attention"
HEAD_MODES = ("none", "last", "all")


@dataclass(frozen=True)
class PipelineDims:
    lm_layers: int
    d_model: int
    ffn_dim: int
    vocab: int
    gated_ffn: bool
    d_q: int
    d_v: int
    grid_cells: int
    qt_heads: int
    qt_layers: int = 1
    text_len: int = 64
    head: str = "last"
    qt_ffn: bool = True
    ordering: str = ATTN_THEN_PROJ
    query_self_attention: bool = False

    def __post_init__(self):
        for name in ("lm_layers", "d_model", "ffn_dim", "vocab", "d_q", "d_v",
                     "grid_cells", "qt_heads", "qt_layers", "text_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}, got {self.head!r}")
        if self.ordering not in (ATTN_THEN_PROJ, PROJ_THEN_ATTN):
            raise ValueError(f"unknown ordering {self.ordering!r}")

    def to_dict(self):
        return dataclasses.asdict(self)


PRESETS = {
    # Vicuna-7B-sized decoder behind a CLIP ViT-L/14-336 grid (24 x 24 cells)
    "llava7b-like": PipelineDims(
        lm_layers=32, d_model=4096, ffn_dim=11008, vocab=32000, gated_ffn=True,
        d_q=1024, d_v=1024, grid_cells=576, qt_heads=16, text_len=64),
    # the trainable toy pipeline with default ModelConfig; text = question + readout
    "toy": PipelineDims(
        lm_layers=2, d_model=48, ffn_dim=192, vocab=8, gated_ffn=False,
        d_q=32, d_v=32, grid_cells=64, qt_heads=4, text_len=2),
}


def load_dims(spec):
    """Preset name, path to a JSON file of PipelineDims fields, or a dict."""
    if isinstance(spec, PipelineDims):
        return spec
    if isinstance(spec, dict):
        return PipelineDims(**spec)
    if spec in PRESETS:
        return PRESETS[spec]
    with open(spec, encoding="utf-8") as fh:
        return PipelineDims(**json.load(fh))


@dataclass(frozen=True)
class FlopsReport:
    budget: int
    lm_tokens: int
    qt_attention: int
    qt_projections: int
    lm_attention_quadratic: int
    lm_linear: int
    head: int

    @property
    def total(self):
        return (self.qt_attention + self.qt_projections + self.lm_attention_quadratic
                + self.lm_linear + self.head)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["total"] = self.total
        return d


def _lm_parts(dims, n):
    d = dims.d_model
    per_ffn = 3 if dims.gated_ffn else 2
    linear = dims.lm_layers * (8 * n * d * d + 2 * n * d * dims.ffn_dim * per_ffn)
    quad = dims.lm_layers * 4 * n * n * d
    head_rows = {"none": 0, "last": 1, "all": n}[dims.head]
    return quad, linear, 2 * head_rows * d * dims.vocab


def lm_flops(dims, n_tokens):
    """Decoder cost for one forward pass over ``n_tokens`` positions."""
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")
    return sum(_lm_parts(dims, n_tokens))


def _qt_parts(dims, m):
    N = dims.grid_cells
    if dims.ordering == ATTN_THEN_PROJ:
        w, kv = dims.d_q, dims.d_v
        entry = 0
        exit_ = 2 * m * dims.d_q * dims.d_model
    else:
        w, kv = dims.d_model, dims.d_model
        entry = 2 * m * dims.d_q * w + 2 * N * dims.d_v * w
        exit_ = 0
    attn = 4 * m * N * w                      # scores + weighted sum, all heads
    proj = 2 * m * w * w + 4 * N * kv * w + 2 * m * w * w   # Q, K/V, output mix
    if dims.qt_ffn:
        proj += 16 * m * w * w
    if dims.query_self_attention:
        proj += 8 * m * w * w
        attn += 4 * m * m * w
    layers = dims.qt_layers
    return layers * attn, layers * proj + entry + exit_


def qt_flops(dims, m):
    """Query transformer cost at budget ``m`` for one image."""
    if m < 1:
        raise ValueError(f"budget m must be >= 1, got {m}")
    return sum(_qt_parts(dims, m))


def flops_report(dims, m):
    dims = load_dims(dims)
    if m < 1:
        raise ValueError(f"budget m must be >= 1, got {m}")
    n = m + dims.text_len
    qa, qp = _qt_parts(dims, m)
    quad, linear, head = _lm_parts(dims, n)
    return FlopsReport(m, n, qa, qp, quad, linear, head)


def total_flops(dims, m):
    return flops_report(dims, m).total


def speedup_ratio(dims, m_low, m_high):
    """``total(m_high) / total(m_low)`` with LM length = budget + text length."""
    if m_low < 1 or m_high < 1:
        raise ValueError("budgets must be >= 1")
    return total_flops(dims, m_high) / total_flops(dims, m_low)


def calibrate_text_length(baseline=576, targets=((16, 8.0), (144, 3.0), (256, 2.0)),
                          max_len=1024):
    """Text length T best matching the target speed-ups under the linear-term
    limit, where the ratio reduces to ``(baseline + T) / (m + T)``.

    Returns ``(T, rows)`` with ``rows`` giving the implied ratio per target.
    """
    def err(T):
        return sum(math.log((baseline + T) / (m + T) / r) ** 2 for m, r in targets)

    best = min(range(1, max_len + 1), key=err)
    rows = [{"budget": m, "target": r, "linear_limit": (baseline + best) / (m + best)}
            for m, r in targets]
    return best, rows


def quadratic_share(dims, n_tokens):
    quad, linear, head = _lm_parts(load_dims(dims), n_tokens)
    return quad / (quad + linear + head)


def sweep(dims, budgets, baseline=576):
    """Reports per budget plus speed-up against ``baseline`` tokens."""
    dims = load_dims(dims)
    base = flops_report(dims, baseline)
    rows = []
    for m in budgets:
        rep = flops_report(dims, m)
        rows.append({**rep.to_dict(), "speedup_vs_baseline": base.total / rep.total})
    return {"dims": dims.to_dict(), "baseline": base.to_dict(), "budgets": rows}


def format_table(result):
    head = f"{'budget':>7} {'lm_tokens':>9} {'total_flops':>20} {'speedup':>8}"
    lines = [head, "-" * len(head)]
    b = result["baseline"]
    lines.append(f"{b['budget']:>7} {b['lm_tokens']:>9} {b['total']:>20d} {'(base)':>8}")
    for r in result["budgets"]:
        lines.append(f"{r['budget']:>7} {r['lm_tokens']:>9} {r['total']:>20d} "
                     f"{r['speedup_vs_baseline']:>7.2f}x")
    return "\n".join(lines)
