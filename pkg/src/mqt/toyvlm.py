"""Desk-scale vision encoder and language model around the query transformer.

Pipeline: image -> patch grid features -> MQT visual tokens -> causal decoder
over ``[visual tokens ; question ; readout]`` -> answer logits.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import (
    ATTN_THEN_PROJ,
    BudgetError,
    ConfigError,
    GridFeatures,
    LatentQueryBank,
    QTParams,
    encode_image,
    init_qt_params,
    init_query_bank,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 24
    patch_size: int = 3
    channels: int = 3
    d_v: int = 32
    d_q: int = 32
    d_lm: int = 48
    n_heads: int = 4
    max_tokens: int = 32
    n_answers: int = 8
    n_questions: int = 4
    lm_layers: int = 2
    lm_heads: int = 4
    ordering: str = ATTN_THEN_PROJ
    query_self_attention: bool = False
    qt_ffn: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.max_tokens < 2 or self.max_tokens % 2:
            raise ConfigError(f"max_tokens must be even and >= 2, got {self.max_tokens}")
        if self.d_lm % self.lm_heads:
            raise ConfigError("d_lm must be divisible by lm_heads")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_cells(self):
        return self.grid ** 2

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown model keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class QuestionAnswer:
    question_id: np.ndarray
    answer: np.ndarray | None = None


def _dense(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_embed_params(cfg, rng):
    fan_in = cfg.channels * cfg.patch_size ** 2
    return {
        "pe_w": Tensor(_dense(rng, fan_in, cfg.d_v), requires_grad=True, name="vision.pe_w"),
        # unit scale so cell identity is as visible as patch content
        "pe_pos": Tensor(rng.normal(0.0, 1.0, size=(cfg.n_cells, cfg.d_v)),
                         requires_grad=True, name="vision.pe_pos"),
    }


def init_lm_params(cfg, rng):
    d = cfg.d_lm
    t = {
        "q_embed": rng.normal(0.0, 0.02, size=(cfg.n_questions, d)),
        "readout": rng.normal(0.0, 0.02, size=(d,)),
        # unit scale: at 0.02 the token content swamps position and the
        # question-to-token lookup never forms
        "pos": rng.normal(0.0, 1.0, size=(cfg.max_tokens, d)),
    }
    for i in range(cfg.lm_layers):
        t[f"l{i}.ln1_g"], t[f"l{i}.ln1_b"] = np.ones(d), np.zeros(d)
        for k in ("w_q", "w_k", "w_v", "w_o"):
            t[f"l{i}.{k}"] = _dense(rng, d, d)
        t[f"l{i}.b_o"] = np.zeros(d)
        t[f"l{i}.ln2_g"], t[f"l{i}.ln2_b"] = np.ones(d), np.zeros(d)
        t[f"l{i}.w1"] = _dense(rng, d, 4 * d)
        t[f"l{i}.b1"] = np.zeros(4 * d)
        t[f"l{i}.w2"] = _dense(rng, 4 * d, d)
        t[f"l{i}.b2"] = np.zeros(d)
    t["lnf_g"], t["lnf_b"] = np.ones(d), np.zeros(d)
    # small head: untrained predictions start near uniform (loss ~ ln K)
    t["head_w"] = rng.normal(0.0, 0.02, size=(d, cfg.n_answers))
    t["head_b"] = np.zeros(cfg.n_answers)
    return {k: Tensor(v, requires_grad=True, name=f"lm.{k}") for k, v in t.items()}


class ToyVLM:
    """All parameters of the pipeline, grouped as vision / bank / qt / lm."""

    def __init__(self, config=None, seed=0):
        cfg = config or ModelConfig()
        self.config = cfg
        self.seed = seed
        ss = np.random.SeedSequence(seed).spawn(4)
        self.embed = init_embed_params(cfg, np.random.default_rng(ss[0]))
        self.bank = init_query_bank(cfg.max_tokens, cfg.d_q, np.random.default_rng(ss[1]))
        self.qt = init_qt_params(cfg.d_v, cfg.d_q, cfg.d_lm, cfg.n_heads,
                                 np.random.default_rng(ss[2]), ordering=cfg.ordering,
                                 query_self_attention=cfg.query_self_attention,
                                 ffn=cfg.qt_ffn)
        self.lm = init_lm_params(cfg, np.random.default_rng(ss[3]))

    @property
    def M(self):
        return self.config.max_tokens

    def groups(self):
        return {
            "vision": dict(self.embed),
            "bank": {"queries": self.bank.queries},
            "qt": dict(self.qt.tensors),
            "lm": dict(self.lm),
        }

    def named_parameters(self):
        return {f"{g}.{k}": t for g, ts in self.groups().items() for k, t in ts.items()}

    def parameters(self, groups=None):
        gs = self.groups()
        keep = gs if groups is None else {g: gs[g] for g in groups}
        return [t for ts in keep.values() for t in ts.values()]

    def set_trainable(self, groups):
        for g, ts in self.groups().items():
            for t in ts.values():
                t.requires_grad = g in groups

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def fingerprint(self):
        h = hashlib.sha256()
        for name, t in self.named_parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def check_budget(self, m):
        if not isinstance(m, (int, np.integer)) or not 1 <= m <= self.M:
            raise BudgetError(f"budget m={m} outside [1, M={self.M}]")
        return int(m)

    def forward_logits(self, images, questions, m):
        grid = patch_embed(images, self.config.patch_size, self.embed)
        v = encode_image(grid, self.bank, self.check_budget(m), self.qt)
        return decode_answer(v, questions, self.lm, self.config)

    def predict(self, images, questions, m, batch_size=256):
        out = []
        with ad.no_grad():
            for lo in range(0, len(images), batch_size):
                logits = self.forward_logits(images[lo:lo + batch_size],
                                             questions[lo:lo + batch_size], m)
                out.append(logits.data)
        return np.concatenate(out)


def extract_patches(images, patch_size):
    """(B, C, S, S) -> (B, cells, C*p*p), cells in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    B, C, Hi, Wi = images.shape
    p = patch_size
    if Hi % p or Wi % p:
        raise ConfigError(f"image {Hi}x{Wi} not divisible by patch size {p}")
    H, W = Hi // p, Wi // p
    x = images.reshape(B, C, H, p, W, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, H * W, C * p * p), H, W


def patch_embed(images, patch_size, embed):
    """Non-overlapping patches, linearly projected, plus a per-cell embedding."""
    patches, H, W = extract_patches(images, patch_size)
    if patches.shape[1] != embed["pe_pos"].shape[0]:
        raise ConfigError(
            f"{patches.shape[1]} patches but {embed['pe_pos'].shape[0]} positional rows")
    feats = ad.add(ad.matmul(Tensor(patches), embed["pe_w"]), embed["pe_pos"])
    return GridFeatures(feats, H, W)


def _causal_mask(n):
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def _decoder_block(x, lm, i, n_heads, mask):
    B, n, d = x.shape
    dh = d // n_heads
    y = ad.layer_norm(x, lm[f"l{i}.ln1_g"], lm[f"l{i}.ln1_b"])

    def heads(w):
        return ad.transpose(ad.reshape(ad.matmul(y, w), (B, n, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(lm[f"l{i}.w_q"]), heads(lm[f"l{i}.w_k"]), heads(lm[f"l{i}.w_v"])
    s = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    a = ad.softmax(s, axis=-1, mask=mask)
    o = ad.reshape(ad.transpose(ad.matmul(a, v), (0, 2, 1, 3)), (B, n, d))
    x = ad.add(x, ad.add(ad.matmul(o, lm[f"l{i}.w_o"]), lm[f"l{i}.b_o"]))
    y = ad.layer_norm(x, lm[f"l{i}.ln2_g"], lm[f"l{i}.ln2_b"])
    y = ad.gelu(ad.add(ad.matmul(y, lm[f"l{i}.w1"]), lm[f"l{i}.b1"]))
    return ad.add(x, ad.add(ad.matmul(y, lm[f"l{i}.w2"]), lm[f"l{i}.b2"]))


def decode_answer(v, questions, lm, config):
    """Answer logits (B, K) read at the trailing readout slot.

    The sequence is ``[v_1 .. v_m ; question ; readout]`` under a causal mask;
    the visual positions carry a learned position embedding.
    """
    tokens = v.tokens if hasattr(v, "tokens") else v
    if tokens.ndim == 2:
        tokens = ad.reshape(tokens, (1,) + tokens.shape)
    B, m, d = tokens.shape
    if d != config.d_lm:
        raise ad.ShapeError(f"visual tokens have width {d}, LM expects {config.d_lm}")
    questions = np.broadcast_to(np.asarray(questions, dtype=np.int64), (B,))
    vis = ad.add(tokens, ad.take_rows(lm["pos"], m))
    qtok = ad.reshape(ad.embedding(lm["q_embed"], questions), (B, 1, d))
    readout = ad.add(Tensor(np.zeros((B, 1, d))), lm["readout"])
    x = ad.concat([vis, qtok, readout], axis=1)
    mask = _causal_mask(m + 2)
    for i in range(config.lm_layers):
        x = _decoder_block(x, lm, i, config.lm_heads, mask)
    last = ad.getitem(x, (slice(None), -1))
    last = ad.layer_norm(last, lm["lnf_g"], lm["lnf_b"])
    return ad.add(ad.matmul(last, lm["head_w"]), lm["head_b"])


def forward_loss(images, qa, m, model, c_m=1.0):
    """``c_m * CE(LM(Q(Z[:m], G), q), y)`` averaged over the batch."""
    logits = model.forward_logits(images, qa.question_id, m)
    answers = np.broadcast_to(np.asarray(qa.answer, dtype=np.int64), (logits.shape[0],))
    return ad.scale(ad.cross_entropy(logits, answers), c_m)


def save_checkpoint(model, path, extra=None):
    """Write ``<path>.bin`` (concatenated little-endian fp64 arrays) and
    ``<path>.json`` (version, config, name/shape/byte-offset per array)."""
    entries, chunks, offset = [], [], 0
    for name, t in model.named_parameters().items():
        buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    blob = b"".join(chunks)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "nbytes": offset,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "params": entries,
    }
    if extra:
        manifest["extra"] = extra
    _atomic_write(f"{path}.bin", blob)
    _atomic_write(f"{path}.json",
                  (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def load_checkpoint(path):
    with open(f"{path}.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if "version" not in manifest:
        raise ValueError(f"{path}.json has no version field")
    if manifest["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest['version']}")
    with open(f"{path}.bin", "rb") as fh:
        blob = fh.read()
    model = ToyVLM(ModelConfig.from_dict(manifest["config"]), seed=manifest.get("seed", 0))
    params = model.named_parameters()
    seen = set()
    for e in manifest["params"]:
        t = params.get(e["name"])
        if t is None:
            raise ValueError(f"checkpoint has unknown parameter {e['name']}")
        if list(t.shape) != e["shape"]:
            raise ValueError(f"shape mismatch for {e['name']}: {t.shape} vs {e['shape']}")
        n = int(np.prod(e["shape"]))
        t.data = np.frombuffer(blob, dtype="<f8", count=n,
                               offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
        seen.add(e["name"])
    missing = set(params) - seen
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
    return model, manifest


def _atomic_write(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


__all__ = [
    "ModelConfig",
    "QuestionAnswer",
    "ToyVLM",
    "LatentQueryBank",
    "QTParams",
    "patch_embed",
    "extract_patches",
    "decode_answer",
    "forward_loss",
    "save_checkpoint",
    "load_checkpoint",
]
