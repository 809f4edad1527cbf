"""Tail-drop (MQT), joint (MRL) and fixed-budget training, two-stage schedule
and budget sweeps."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .core import BudgetError, ConfigError
from .tasks import TaskSpec, TaskStream
from .toyvlm import ModelConfig, QuestionAnswer, ToyVLM, patch_embed, decode_answer
from .core import encode_image

logger = logging.getLogger(__name__)

REGIMES = ("mqt", "mrl", "fixed")
TOKEN_SET_KINDS = ("linear", "log", "custom")
LOG_COLUMNS = ("step", "stage", "regime", "budget", "loss", "cum_query_tokens")


@dataclass(frozen=True)
class TokenSet:
    kind: str
    budgets: tuple

    def __post_init__(self):
        if not self.budgets:
            raise ConfigError("token set is empty")
        if list(self.budgets) != sorted(set(self.budgets)):
            raise ConfigError(f"token set must be sorted and distinct: {self.budgets}")
        if self.budgets[0] < 1:
            raise ConfigError("budgets must be >= 1")

    def __len__(self):
        return len(self.budgets)

    @property
    def mean(self):
        return float(np.mean(self.budgets))


def build_token_set(kind, M, budgets=None):
    """``linear``: 2, 4, ..., M.  ``log``: 2, 4, 8, ..., M (M a power of two).
    ``custom``: the given sorted budgets, each in [1, M]."""
    if M < 2:
        raise ConfigError(f"M must be >= 2, got {M}")
    if kind == "linear":
        if M % 2:
            raise ConfigError(f"linear token set needs even M, got {M}")
        return TokenSet("linear", tuple(range(2, M + 1, 2)))
    if kind == "log":
        if M & (M - 1):
            raise ConfigError(f"log token set needs M a power of two, got {M}")
        return TokenSet("log", tuple(2 ** k for k in range(1, M.bit_length())))
    if kind == "custom":
        if budgets is None:
            raise ConfigError("custom token set needs explicit budgets")
        budgets = tuple(int(b) for b in budgets)
        if max(budgets) > M:
            raise ConfigError(f"budget {max(budgets)} exceeds M={M}")
        return TokenSet("custom", budgets)
    raise ConfigError(f"unknown token set kind {kind!r}; expected one of {TOKEN_SET_KINDS}")


def sample_budget(token_set, rng):
    """Uniform draw from the set."""
    return token_set.budgets[int(rng.integers(len(token_set.budgets)))]


@dataclass
class TrainConfig:
    regime: str
    token_set: object = "linear"
    fixed_budget: int | None = None
    stage1_steps: int = 300
    stage2_steps: int = 2000
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-3
    lr_decay: bool = False
    batch_size: int = 32
    seed: int = 0
    elastic_in_stage1: bool = False
    c_m: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    eval_samples: int = 2000
    eval_seed: int = 10_000

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime: expected one of {REGIMES}, got {self.regime!r}")
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("stage step counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not isinstance(self.c_m, dict):
            raise ConfigError("c_m must be a mapping budget -> weight")
        self.c_m = {int(k): float(v) for k, v in self.c_m.items()}
        M = self.model_config().max_tokens
        if self.regime == "fixed":
            budget = M if self.fixed_budget is None else self.fixed_budget
            if not 1 <= budget <= M:
                raise ConfigError(f"fixed_budget: must lie in [1, {M}], got {budget}")
        self.resolved_token_set()

    # -- derived objects --------------------------------------------------
    def task_spec(self):
        try:
            return TaskSpec(**self.task)
        except TypeError as exc:
            raise ConfigError(f"task: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"task: {exc}") from exc

    def model_config(self):
        spec = self.task_spec()
        base = {
            "image_size": spec.image_size,
            "patch_size": spec.patch_size,
            "n_answers": spec.n_answers,
            "n_questions": spec.n_questions,
        }
        base.update(self.model)
        try:
            return ModelConfig.from_dict(base)
        except TypeError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def resolved_token_set(self):
        M = self.model_config().max_tokens
        if isinstance(self.token_set, str):
            return build_token_set(self.token_set, M)
        if isinstance(self.token_set, (list, tuple)):
            return build_token_set("custom", M, self.token_set)
        raise ConfigError(f"token_set: expected 'linear', 'log' or a list, got {self.token_set!r}")

    def weight(self, m):
        return self.c_m.get(int(m), 1.0)

    # -- (de)serialization -------------------------------------------------
    def to_dict(self):
        d = dataclasses.asdict(self)
        d["c_m"] = {str(k): v for k, v in sorted(self.c_m.items())}
        d["task"] = self.task_spec().to_dict()
        d["model"] = self.model_config().to_dict()
        if isinstance(d["token_set"], tuple):
            d["token_set"] = list(d["token_set"])
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "regime" not in d:
            raise ConfigError("missing required key: regime")
        return cls(**d)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class TrainRecord:
    step: int
    stage: int
    regime: str
    budget: int | None
    loss: float
    cum_query_tokens: int
    n_forward: int = 1
    n_backward: int = 1


class TrainLog:
    def __init__(self):
        self.records = []
        self.cum_query_tokens = 0

    def append(self, record):
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("train log steps must increase")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def budgets(self, stage=None):
        return [r.budget for r in self.records if stage is None or r.stage == stage]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([r.step, r.stage, r.regime, "" if r.budget is None else r.budget,
                        repr(r.loss), r.cum_query_tokens])
        return buf.getvalue()


def _as_qa(batch):
    return QuestionAnswer(batch.questions, batch.answers)


def _budget_loss(model, grid, batch, m, c_m):
    v = encode_image(grid, model.bank, m, model.qt)
    logits = decode_answer(v, batch.questions, model.lm, model.config)
    return ad.scale(ad.cross_entropy(logits, batch.answers), c_m)


def _optimize(loss, model, optimizer):
    model.zero_grad()
    loss.backward()
    optimizer.step()


def train_step_mqt(batch, model, optimizer, token_set, rng, log=None, step=0, stage=2,
                   c_m=None, budget=None, regime="mqt"):
    """One tail-drop step: a single budget ``m`` for the whole batch.

    ``budget`` forces ``m`` (used by the fixed-budget regime, which is the same
    step with a constant draw).
    """
    m = sample_budget(token_set, rng) if budget is None else budget
    weight = 1.0 if c_m is None else c_m.get(m, 1.0)
    grid = patch_embed(batch.images, model.config.patch_size, model.embed)
    loss = _budget_loss(model, grid, batch, m, weight)
    _optimize(loss, model, optimizer)
    return _record(log, step, stage, regime, m, float(loss.data), len(batch) * m, 1)


def train_step_mrl(batch, model, optimizer, token_set, log=None, step=0, stage=2, c_m=None):
    """Joint step: sum of c_m-weighted losses over every budget, one update."""
    grid = patch_embed(batch.images, model.config.patch_size, model.embed)
    total = None
    for m in token_set.budgets:
        weight = 1.0 if c_m is None else c_m.get(m, 1.0)
        loss = _budget_loss(model, grid, batch, m, weight)
        total = loss if total is None else ad.add(total, loss)
    _optimize(total, model, optimizer)
    # every budget runs; the largest is logged as the step's budget
    return _record(log, step, stage, "mrl", token_set.budgets[-1], float(total.data),
                   len(batch) * sum(token_set.budgets), len(token_set))


def _record(log, step, stage, regime, m, loss, tokens, n_forward):
    cum = (log.cum_query_tokens if log is not None else 0) + tokens
    rec = TrainRecord(step, stage, regime, m, loss, cum, n_forward=n_forward, n_backward=1)
    if log is not None:
        log.cum_query_tokens = cum
        log.append(rec)
    return rec


def _stage_optimizer(model, groups, lr):
    model.set_trainable(groups)
    return ad.Adam(model.parameters(groups), lr=lr)


def _set_lr(opt, base, step, total, decay):
    # constant for the first half, then linear decay to 10%
    if not decay or total <= 1:
        opt.lr = base
        return
    frac = step / (total - 1)
    opt.lr = base if frac <= 0.5 else base * (1.0 - 1.8 * (frac - 0.5))


def train_two_stage(config, data=None, model=None, progress=None):
    """Stage 1 trains vision + bank + QT with the LM frozen, at the full budget
    M (or elastically with ``elastic_in_stage1``).  Stage 2 unfreezes everything
    and applies the configured regime.  Returns ``(model, log)``.
    """
    if model is None:
        model = ToyVLM(config.model_config(), seed=config.seed)
    if data is None:
        data = TaskStream(config.task_spec())
    token_set = config.resolved_token_set()
    M = model.M
    if token_set.budgets[-1] > M:
        raise ConfigError(f"token set exceeds M={M}")
    full = build_token_set("custom", M, [M])
    rng = np.random.default_rng([config.seed, 0xB0D6E7])
    log = TrainLog()
    c_m = config.c_m
    step = 0

    opt = _stage_optimizer(model, ("vision", "bank", "qt"), config.lr_stage1)
    for i in range(config.stage1_steps):
        _set_lr(opt, config.lr_stage1, i, config.stage1_steps, config.lr_decay)
        batch = data.batch(step, config.batch_size)
        if config.elastic_in_stage1:
            train_step_mqt(batch, model, opt, token_set, rng, log, step, 1, c_m)
        else:
            train_step_mqt(batch, model, opt, full, rng, log, step, 1, c_m, budget=M,
                           regime=config.regime)
        step += 1
        if progress:
            progress(log.records[-1])

    opt = _stage_optimizer(model, ("vision", "bank", "qt", "lm"), config.lr_stage2)
    fixed = M if config.fixed_budget is None else config.fixed_budget
    for i in range(config.stage2_steps):
        _set_lr(opt, config.lr_stage2, i, config.stage2_steps, config.lr_decay)
        batch = data.batch(step, config.batch_size)
        if config.regime == "mqt":
            train_step_mqt(batch, model, opt, token_set, rng, log, step, 2, c_m)
        elif config.regime == "mrl":
            train_step_mrl(batch, model, opt, token_set, log, step, 2, c_m)
        else:
            train_step_mqt(batch, model, opt, token_set, rng, log, step, 2, c_m,
                           budget=fixed, regime="fixed")
        step += 1
        if progress:
            progress(log.records[-1])
    model.set_trainable(("vision", "bank", "qt", "lm"))
    return model, log


def evaluate_sweep(model, dataset, budgets, batch_size=500):
    """Exact-match accuracy at each budget (any integer in [1, M])."""
    out = {}
    for m in budgets:
        if not isinstance(m, (int, np.integer)) or not 1 <= m <= model.M:
            raise BudgetError(f"budget {m} outside [1, M={model.M}]")
        pred = model.predict(dataset.images, dataset.questions, int(m), batch_size).argmax(axis=1)
        out[int(m)] = float(np.mean(pred == dataset.answers))
    return out
