"""Matryoshka query transformer: latent query bank, prefix truncation and a
single cross-attention layer over grid features."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ATTN_THEN_PROJ = "attention-then-projection"
PROJ_THEN_ATTN = "projection-then-attention"
ORDERINGS = (ATTN_THEN_PROJ, PROJ_THEN_ATTN)


class ConfigError(ValueError):
    """Invalid model or training configuration."""


class BudgetError(ValueError):
    """Token budget outside [1, M]."""


@dataclass
class LatentQueryBank:
    """The M x d_q learned query embeddings; row order is fixed for life."""

    queries: Tensor

    @property
    def M(self):
        return self.queries.shape[0]

    @property
    def d_q(self):
        return self.queries.shape[1]


@dataclass
class GridFeatures:
    """Flattened (H*W) x d_v patch features, optionally with a leading batch axis."""

    features: Tensor
    H: int
    W: int

    def __post_init__(self):
        if self.features.shape[-2] != self.H * self.W:
            raise ad.ShapeError(
                f"grid has {self.features.shape[-2]} rows, expected H*W = {self.H * self.W}")

    @property
    def n_cells(self):
        return self.H * self.W


@dataclass
class QTParams:
    """Weights of the single-layer query transformer.

    ``tensors`` maps short names to leaf tensors.  With the default ordering the
    attention block runs at width d_q and ``proj_w``/``proj_b`` lift its output
    to d_lm; the other ordering first maps queries (``in_q_*``) and grid
    (``in_g_*``) to d_lm and attends there.
    """

    n_heads: int
    ordering: str = ATTN_THEN_PROJ
    query_self_attention: bool = False
    ffn: bool = True
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def width(self):
        return self.tensors["w_q"].shape[1]

    @property
    def d_lm(self):
        if self.ordering == ATTN_THEN_PROJ:
            return self.tensors["proj_w"].shape[1]
        return self.width


@dataclass
class VisualTokens:
    tokens: Tensor

    @property
    def m(self):
        return self.tokens.shape[-2]


def init_query_bank(M, d_q, seed):
    """Gaussian N(0, 0.02^2) query bank, deterministic per seed."""
    if M < 2:
        raise ConfigError(f"query bank needs M >= 2, got {M}")
    if d_q < 1:
        raise ConfigError(f"d_q must be positive, got {d_q}")
    rng = np.random.default_rng(seed)
    return LatentQueryBank(Tensor(rng.normal(0.0, 0.02, size=(M, d_q)),
                                  requires_grad=True, name="bank"))


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_qt_params(d_v, d_q, d_lm, n_heads, seed, ordering=ATTN_THEN_PROJ,
                   query_self_attention=False, ffn=True):
    if ordering not in ORDERINGS:
        raise ConfigError(f"unknown ordering {ordering!r}; expected one of {ORDERINGS}")
    width = d_q if ordering == ATTN_THEN_PROJ else d_lm
    if width % n_heads:
        raise ConfigError(f"attention width {width} not divisible by {n_heads} heads")
    rng = np.random.default_rng(seed)
    t = {}
    kv_dim = d_v
    if ordering == PROJ_THEN_ATTN:
        t["in_q_w"] = _dense(rng, d_q, d_lm)
        t["in_q_b"] = np.zeros(d_lm)
        t["in_g_w"] = _dense(rng, d_v, d_lm)
        t["in_g_b"] = np.zeros(d_lm)
        kv_dim = d_lm
    if query_self_attention:
        t["ln_s_g"], t["ln_s_b"] = np.ones(width), np.zeros(width)
        for k in ("w_sq", "w_sk", "w_sv", "w_so"):
            t[k] = _dense(rng, width, width)
    t["ln_q_g"], t["ln_q_b"] = np.ones(width), np.zeros(width)
    t["ln_kv_g"], t["ln_kv_b"] = np.ones(kv_dim), np.zeros(kv_dim)
    t["w_q"] = _dense(rng, width, width)
    t["w_k"] = _dense(rng, kv_dim, width)
    t["w_v"] = _dense(rng, kv_dim, width)
    t["w_o"] = _dense(rng, width, width)
    t["b_o"] = np.zeros(width)
    if ffn:
        t["ln_f_g"], t["ln_f_b"] = np.ones(width), np.zeros(width)
        t["w_ff1"] = _dense(rng, width, 4 * width)
        t["b_ff1"] = np.zeros(4 * width)
        t["w_ff2"] = _dense(rng, 4 * width, width)
        t["b_ff2"] = np.zeros(width)
    if ordering == ATTN_THEN_PROJ:
        t["proj_w"] = _dense(rng, d_q, d_lm)
        t["proj_b"] = np.zeros(d_lm)
    tensors = {k: Tensor(v, requires_grad=True, name=f"qt.{k}") for k, v in t.items()}
    return QTParams(n_heads=n_heads, ordering=ordering,
                    query_self_attention=query_self_attention, ffn=ffn, tensors=tensors)


def truncate_queries(bank, m):
    """The first ``m`` latent queries, sharing storage with the bank."""
    if not 1 <= m <= bank.M:
        raise BudgetError(f"budget m={m} outside [1, M={bank.M}]")
    return ad.take_rows(bank.queries, m)


def _split_heads(x, h):
    # (B, n, d) -> (B, h, n, d/h)
    b, n, d = x.shape
    return ad.transpose(ad.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _self_attend(q, p):
    h = p.n_heads
    m, d = q.shape
    dh = d // h
    x = ad.layer_norm(q, p["ln_s_g"], p["ln_s_b"])
    qh = ad.transpose(ad.reshape(ad.matmul(x, p["w_sq"]), (m, h, dh)), (1, 0, 2))
    kh = ad.transpose(ad.reshape(ad.matmul(x, p["w_sk"]), (m, h, dh)), (1, 2, 0))
    vh = ad.transpose(ad.reshape(ad.matmul(x, p["w_sv"]), (m, h, dh)), (1, 0, 2))
    a = ad.softmax(ad.scale(ad.matmul(qh, kh), 1.0 / math.sqrt(dh)), axis=-1)
    o = ad.reshape(ad.transpose(ad.matmul(a, vh), (1, 0, 2)), (m, d))
    return ad.add(q, ad.matmul(o, p["w_so"]))


def cross_attend(q, grid, params, return_weights=False):
    """Queries ``q`` (m x d) attend over grid rows ``grid`` ((B,) N x d_kv).

    Pre-norm on both streams, residual around attention and around the GELU
    feed-forward.  Query rows never see each other (unless the optional
    self-attention block is enabled), so row ``i`` of the output depends only
    on query ``i`` and the grid.  Returns (B, m, d) or (m, d) for an unbatched
    grid; with ``return_weights`` also the (B, h, m, N) attention weights.
    """
    p = params
    h = p.n_heads
    d = p.width
    g = grid.features if isinstance(grid, GridFeatures) else grid
    unbatched = g.ndim == 2
    if unbatched:
        g = ad.reshape(g, (1,) + g.shape)
    if q.ndim != 2 or q.shape[1] != d:
        raise ad.ShapeError(f"queries have shape {q.shape}, expected (m, {d})")
    if g.shape[-1] != p["ln_kv_g"].shape[0]:
        raise ad.ShapeError(
            f"grid feature dim {g.shape[-1]} != expected {p['ln_kv_g'].shape[0]}")
    m = q.shape[0]
    B, N, _ = g.shape
    dh = d // h
    stable = not p.query_self_attention

    if p.query_self_attention:
        q = _self_attend(q, p)
    qn = ad.layer_norm(q, p["ln_q_g"], p["ln_q_b"])
    kvn = ad.layer_norm(g, p["ln_kv_g"], p["ln_kv_b"])
    Q = ad.matmul(qn, p["w_q"], row_stable=stable)                  # (m, d)
    K = _split_heads(ad.matmul(kvn, p["w_k"]), h)                   # (B, h, N, dh)
    V = _split_heads(ad.matmul(kvn, p["w_v"]), h)
    Qh = ad.transpose(ad.reshape(Q, (m, h, dh)), (1, 0, 2))         # (h, m, dh)
    scores = ad.matmul(Qh, ad.transpose(K, (0, 1, 3, 2)), row_stable=stable)
    A = ad.softmax(ad.scale(scores, 1.0 / math.sqrt(dh)), axis=-1)  # (B, h, m, N)
    O = ad.matmul(A, V, row_stable=stable)                          # (B, h, m, dh)
    O = ad.reshape(ad.transpose(O, (0, 2, 1, 3)), (B, m, d))
    x = ad.add(q, ad.add(ad.matmul(O, p["w_o"], row_stable=stable), p["b_o"]))
    if p.ffn:
        y = ad.layer_norm(x, p["ln_f_g"], p["ln_f_b"])
        y = ad.gelu(ad.add(ad.matmul(y, p["w_ff1"], row_stable=stable), p["b_ff1"]))
        x = ad.add(x, ad.add(ad.matmul(y, p["w_ff2"], row_stable=stable), p["b_ff2"]))
    if unbatched:
        x = ad.reshape(x, (m, d))
    if return_weights:
        return x, A
    return x


def _encode(grid, bank, m, params):
    q = truncate_queries(bank, m)
    if grid.n_cells < bank.M:
        warnings.warn(f"M={bank.M} exceeds grid cells {grid.n_cells}: no compression",
                      stacklevel=3)
    p = params
    if p.ordering == ATTN_THEN_PROJ:
        x, A = cross_attend(q, grid, p, return_weights=True)
        out = ad.add(ad.matmul(x, p["proj_w"], row_stable=not p.query_self_attention),
                     p["proj_b"])
    else:
        q = ad.add(ad.matmul(q, p["in_q_w"], row_stable=not p.query_self_attention),
                   p["in_q_b"])
        g = ad.add(ad.matmul(grid.features, p["in_g_w"]), p["in_g_b"])
        out, A = cross_attend(q, g, p, return_weights=True)
    return out, A


def encode_image(grid, bank, m, params):
    """Visual tokens ``Q(Z[:m], G)``: shape ((B,) m, d_lm)."""
    out, _ = _encode(grid, bank, m, params)
    return VisualTokens(out)


def export_attention(grid, bank, m, params, path=None):
    """Head-averaged cross-attention weights, (m, H*W), for one image.

    When ``path`` is given the matrix is also written as CSV with header
    ``token_index,cell_index,weight``.
    """
    if grid.features.ndim != 2:
        raise ad.ShapeError("export_attention takes a single (unbatched) grid")
    with ad.no_grad():
        _, A = _encode(grid, bank, m, params)
    w = A.data[0].mean(axis=0)
    if path is not None:
        write_attention_csv(w, path)
    return w


def write_attention_csv(weights, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["token_index", "cell_index", "weight"])
        for i, row in enumerate(weights):
            for j, w in enumerate(row):
                writer.writerow([i, j, repr(float(w))])
