import csv
import io

import numpy as np
import pytest
from scipy import stats

from mqt import autodiff as ad
from mqt.core import BudgetError, ConfigError
from mqt.tasks import TaskSpec, TaskStream, generate
from mqt.toyvlm import ToyVLM
from mqt.training import (
    LOG_COLUMNS,
    TrainConfig,
    TrainLog,
    TrainRecord,
    build_token_set,
    evaluate_sweep,
    sample_budget,
    train_step_mqt,
    train_step_mrl,
    train_two_stage,
)

FAST = dict(stage1_steps=2, stage2_steps=3, batch_size=4)


# --- token sets ----------------------------------------------------------------------

def test_linear_set():
    ts = build_token_set("linear", 32)
    assert ts.budgets == tuple(range(2, 33, 2))
    assert ts.mean == 17.0


def test_log_set_256():
    assert build_token_set("log", 256).budgets == (2, 4, 8, 16, 32, 64, 128, 256)
    assert build_token_set("log", 32).budgets == (2, 4, 8, 16, 32)


@pytest.mark.parametrize("kind,M,budgets", [("log", 24, None), ("linear", 31, None),
                                            ("custom", 8, [2, 9]), ("custom", 8, [4, 2]),
                                            ("custom", 8, None), ("spiral", 8, None)])
def test_token_set_errors(kind, M, budgets):
    with pytest.raises(ConfigError):
        build_token_set(kind, M, budgets)


def test_sampling_is_uniform():
    ts = build_token_set("linear", 32)
    rng = np.random.default_rng(0)
    draws = [sample_budget(ts, rng) for _ in range(16_000)]
    counts = np.array([draws.count(b) for b in ts.budgets])
    assert stats.chisquare(counts).pvalue > 1e-3
    assert abs(np.mean(draws) - ts.mean) / ts.mean < 0.02


# --- config -----------------------------------------------------------------------------

def test_missing_regime_named():
    with pytest.raises(ConfigError, match="regime"):
        TrainConfig.from_dict({"seed": 1})


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"regime": "mqt", "bogus": 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"regime": "mqt", "model": {"depth": 3}})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"regime": "mqt", "task": {"name": "nope"}})


def test_fixed_budget_range():
    with pytest.raises(ConfigError):
        TrainConfig(regime="fixed", fixed_budget=33)
    with pytest.raises(ConfigError):
        TrainConfig(regime="sometimes")


def test_config_roundtrip_is_canonical():
    cfg = TrainConfig(regime="mrl", token_set="log", c_m={"4": 0.5}, seed=3)
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again.canonical_json() == cfg.canonical_json()
    assert again.weight(4) == 0.5 and again.weight(8) == 1.0


def test_model_inherits_task_geometry():
    cfg = TrainConfig(regime="mqt", task={"name": "detail-locate", "n_targets": 6})
    assert cfg.model_config().n_questions == 6


# --- steps ---------------------------------------------------------------------------------

def _setup(seed=0):
    model = ToyVLM(TrainConfig(regime="mqt").model_config(), seed=seed)
    opt = ad.Adam(model.parameters(), lr=1e-3)
    batch = TaskStream(TaskSpec()).batch(0, 4)
    return model, opt, batch


def test_mqt_step_logs_budget_and_tokens():
    model, opt, batch = _setup()
    log = TrainLog()
    ts = build_token_set("linear", 32)
    rng = np.random.default_rng(1)
    ref = np.random.default_rng(1)
    for step in range(3):
        rec = train_step_mqt(batch, model, opt, ts, rng, log, step)
        assert rec.budget == sample_budget(ts, ref)
    assert log.cum_query_tokens == 4 * sum(log.budgets())


def test_mrl_step_counts_every_budget():
    model, opt, batch = _setup()
    log = TrainLog()
    ts = build_token_set("log", 32)
    rec = train_step_mrl(batch, model, opt, ts, log, 0)
    assert rec.n_forward == len(ts) and rec.n_backward == 1
    assert rec.cum_query_tokens == 4 * sum(ts.budgets)


def test_mrl_loss_is_weighted_sum():
    model, opt, batch = _setup()
    ts = build_token_set("custom", 32, [2, 8])
    before = {k: t.data.copy() for k, t in model.named_parameters().items()}
    with ad.no_grad():
        a = float(ad.cross_entropy(model.forward_logits(batch.images, batch.questions, 2),
                                   batch.answers).data)
        b = float(ad.cross_entropy(model.forward_logits(batch.images, batch.questions, 8),
                                   batch.answers).data)
    rec = train_step_mrl(batch, model, opt, ts, None, 0, c_m={2: 0.25})
    assert rec.loss == pytest.approx(0.25 * a + b, rel=1e-12)
    assert any(not np.array_equal(before[k], t.data) for k, t in model.named_parameters().items())


def test_zero_weight_step_leaves_parameters():
    model, opt, batch = _setup()
    before = model.fingerprint()
    ts = build_token_set("custom", 32, [32])
    train_step_mqt(batch, model, opt, ts, np.random.default_rng(0), c_m={32: 0.0})
    assert model.fingerprint() == before


def test_log_monotone_and_csv():
    log = TrainLog()
    log.append(TrainRecord(0, 1, "mqt", 32, 2.0, 128))
    with pytest.raises(ValueError):
        log.append(TrainRecord(0, 1, "mqt", 32, 2.0, 256))
    rows = list(csv.reader(io.StringIO(log.to_csv())))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert rows[1][:4] == ["0", "1", "mqt", "32"]


# --- two-stage schedule ------------------------------------------------------------------

def test_stage_one_freezes_lm():
    cfg = TrainConfig(regime="mqt", stage1_steps=3, stage2_steps=0, batch_size=4)
    init = ToyVLM(cfg.model_config(), seed=0)
    lm_before = {k: t.data.copy() for k, t in init.lm.items()}
    qt_before = {k: t.data.copy() for k, t in init.qt.tensors.items()}
    model, log = train_two_stage(cfg, model=init)
    assert all(np.array_equal(lm_before[k], t.data) for k, t in model.lm.items())
    assert any(not np.array_equal(qt_before[k], t.data) for k, t in model.qt.tensors.items())
    assert log.budgets(stage=1) == [32, 32, 32]


def test_elastic_stage_one_samples_budgets():
    cfg = TrainConfig(regime="mqt", stage1_steps=6, stage2_steps=0, batch_size=2,
                      elastic_in_stage1=True)
    _, log = train_two_stage(cfg)
    assert len(set(log.budgets(stage=1))) > 1


@pytest.mark.parametrize("regime", ["mqt", "mrl", "fixed"])
def test_regimes_with_singleton_set_agree(regime):
    ref = TrainConfig(regime="fixed", token_set=[32], **FAST)
    other = TrainConfig(regime=regime, token_set=[32], **FAST)
    a, _ = train_two_stage(ref)
    b, _ = train_two_stage(other)
    assert a.fingerprint() == b.fingerprint()


def test_training_is_deterministic():
    cfg = TrainConfig(regime="mqt", **FAST)
    (a, la), (b, lb) = train_two_stage(cfg), train_two_stage(cfg)
    assert a.fingerprint() == b.fingerprint()
    assert la.to_csv() == lb.to_csv()


def test_lr_decay_changes_result():
    a, _ = train_two_stage(TrainConfig(regime="mqt", **FAST))
    b, _ = train_two_stage(TrainConfig(regime="mqt", lr_decay=True, **FAST))
    assert a.fingerprint() != b.fingerprint()


def test_untrained_sweep_is_chance():
    model = ToyVLM(TrainConfig(regime="mqt").model_config(), seed=0)
    data = generate(TaskSpec(), 2000, seed=123)
    acc = evaluate_sweep(model, data, [2, 7, 32])
    assert all(abs(a - 1 / 8) < 0.05 for a in acc.values())


def test_sweep_rejects_budget_above_m():
    model = ToyVLM(TrainConfig(regime="mqt").model_config(), seed=0)
    data = generate(TaskSpec(), 4, seed=0)
    with pytest.raises(BudgetError, match="M=32"):
        evaluate_sweep(model, data, [33])
