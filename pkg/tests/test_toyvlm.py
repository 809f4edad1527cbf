import json

import numpy as np
import pytest

from mqt import autodiff as ad
from mqt.autodiff import Tensor
from mqt.core import BudgetError, ConfigError
from mqt.tasks import TaskSpec, generate
from mqt.toyvlm import (
    ModelConfig,
    QuestionAnswer,
    ToyVLM,
    decode_answer,
    extract_patches,
    forward_loss,
    load_checkpoint,
    patch_embed,
    save_checkpoint,
)

from conftest import gradcheck

CFG = ModelConfig()


@pytest.fixture(scope="module")
def model():
    return ToyVLM(CFG, seed=0)


def images(n, seed=0):
    return np.random.default_rng(seed).random((n, 3, 24, 24))


# --- patch embedding ---------------------------------------------------------

def test_patch_grid_shape(model):
    g = patch_embed(images(2), 3, model.embed)
    assert (g.H, g.W) == (8, 8)
    assert g.features.shape == (2, 64, CFG.d_v)


def test_zero_image_gives_positional_embedding(model):
    g = patch_embed(np.zeros((3, 24, 24)), 3, model.embed)
    assert np.array_equal(g.features.data[0], model.embed["pe_pos"].data)


def test_patch_divisibility_error(model):
    with pytest.raises(ConfigError):
        patch_embed(np.zeros((1, 3, 25, 25)), 3, model.embed)
    with pytest.raises(ConfigError):
        ModelConfig(image_size=25)


def test_extract_patches_row_major():
    img = np.arange(3 * 6 * 6, dtype=float).reshape(3, 6, 6)
    p, H, W = extract_patches(img, 3)
    assert (H, W) == (2, 2)
    np.testing.assert_array_equal(p[0, 1], img[:, 0:3, 3:6].reshape(-1))
    np.testing.assert_array_equal(p[0, 2], img[:, 3:6, 0:3].reshape(-1))


def test_patch_embed_gradient():
    m = ToyVLM(ModelConfig(), seed=1)
    x = images(2, 3)
    err = gradcheck(lambda *_: patch_embed(x, 3, m.embed).features,
                    [m.embed["pe_w"], m.embed["pe_pos"]], max_entries=20)
    assert err < 1e-5


# --- decoder -------------------------------------------------------------------

@pytest.mark.parametrize("m", [1, 2, 7, 32])
def test_logit_shape_every_budget(model, m):
    v = Tensor(np.random.default_rng(m).standard_normal((3, m, CFG.d_lm)))
    assert decode_answer(v, [0, 1, 2], model.lm, CFG).shape == (3, CFG.n_answers)


def test_single_unbatched_tokens(model):
    v = Tensor(np.random.default_rng(0).standard_normal((5, CFG.d_lm)))
    assert decode_answer(v, 1, model.lm, CFG).shape == (1, CFG.n_answers)


def test_readout_sees_every_visual_token(model):
    r = np.random.default_rng(4)
    base = r.standard_normal((1, 9, CFG.d_lm))
    ref = decode_answer(Tensor(base), [0], model.lm, CFG).data
    for j in range(9):
        pert = base.copy()
        pert[0, j] += r.standard_normal(CFG.d_lm)   # a constant shift would vanish in layer norm
        assert not np.allclose(decode_answer(Tensor(pert), [0], model.lm, CFG).data, ref)


def test_question_changes_logits(model):
    v = Tensor(np.random.default_rng(1).standard_normal((1, 6, CFG.d_lm)))
    a = decode_answer(v, [0], model.lm, CFG).data
    b = decode_answer(v, [3], model.lm, CFG).data
    assert not np.allclose(a, b)


def test_zeroed_lm_returns_head_bias():
    m = ToyVLM(CFG, seed=2)
    bias = np.arange(CFG.n_answers, dtype=float)
    for name, t in m.lm.items():
        t.data = np.zeros_like(t.data)
    m.lm["head_b"].data = bias.copy()
    for k in (1, 7, 32):
        v = Tensor(np.random.default_rng(k).standard_normal((2, k, CFG.d_lm)))
        np.testing.assert_array_equal(decode_answer(v, [0, 1], m.lm, CFG).data,
                                      np.tile(bias, (2, 1)))


def test_width_mismatch(model):
    with pytest.raises(ad.ShapeError):
        decode_answer(Tensor(np.zeros((1, 3, CFG.d_lm + 1))), [0], model.lm, CFG)


# --- full forward ----------------------------------------------------------------

def test_untrained_loss_near_log_k():
    m = ToyVLM(CFG, seed=5)
    s = generate(TaskSpec("detail-locate"), 200, seed=1)
    with ad.no_grad():
        loss = forward_loss(s.images, QuestionAnswer(s.questions, s.answers), CFG.max_tokens, m)
    assert abs(float(loss.data) - np.log(CFG.n_answers)) < 0.3


def test_zero_weight_gives_zero_loss_and_gradients():
    m = ToyVLM(CFG, seed=6)
    s = generate(TaskSpec("detail-locate"), 4, seed=0)
    loss = forward_loss(s.images, QuestionAnswer(s.questions, s.answers), 8, m, c_m=0.0)
    loss.backward()
    assert float(loss.data) == 0.0
    for t in m.parameters():
        assert t.grad is not None and not np.any(t.grad)


def test_every_budget_finite_and_differentiable():
    m = ToyVLM(CFG, seed=7)
    s = generate(TaskSpec("detail-locate"), 2, seed=0)
    qa = QuestionAnswer(s.questions, s.answers)
    for k in range(1, CFG.max_tokens + 1):
        m.zero_grad()
        loss = forward_loss(s.images, qa, k, m)
        loss.backward()
        assert np.isfinite(loss.data)
        assert np.isfinite(m.bank.queries.grad).all()


@pytest.mark.parametrize("m", [0, 33, 2.0])
def test_budget_validation(model, m):
    with pytest.raises(BudgetError):
        model.forward_logits(images(1), [0], m)


def test_loss_is_deterministic():
    s = generate(TaskSpec("detail-locate"), 8, seed=0)
    qa = QuestionAnswer(s.questions, s.answers)
    a = forward_loss(s.images, qa, 12, ToyVLM(CFG, seed=9)).data
    b = forward_loss(s.images, qa, 12, ToyVLM(CFG, seed=9)).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("m", [1, 2, 16, 32])
def test_end_to_end_gradient_all_groups(m):
    small = ModelConfig(max_tokens=32)
    net = ToyVLM(small, seed=m)
    s = generate(TaskSpec("detail-locate"), 2, seed=m)
    qa = QuestionAnswer(s.questions, s.answers)
    params = net.parameters()
    err = gradcheck(lambda *_: forward_loss(s.images, qa, m, net), params, max_entries=4)
    assert err < 1e-5


def test_groups_cover_all_parameters(model):
    named = model.named_parameters()
    assert len(named) == len(model.parameters())
    assert set(model.groups()) == {"vision", "bank", "qt", "lm"}


def test_set_trainable_freezes_groups():
    m = ToyVLM(CFG, seed=3)
    m.set_trainable(("qt",))
    assert all(t.requires_grad for t in m.qt.tensors.values())
    assert not any(t.requires_grad for t in m.lm.values())
    assert not m.bank.queries.requires_grad


# --- checkpoints -------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, model):
    path = str(tmp_path / "ckpt")
    manifest = save_checkpoint(model, path, extra={"note": 1})
    back, man = load_checkpoint(path)
    assert back.fingerprint() == model.fingerprint()
    assert man["extra"] == {"note": 1}
    assert manifest["version"] == 1
    x = images(2)
    np.testing.assert_array_equal(back.predict(x, [0, 1], 5), model.predict(x, [0, 1], 5))


def test_checkpoint_bytes_are_deterministic(tmp_path):
    save_checkpoint(ToyVLM(CFG, seed=4), str(tmp_path / "a"))
    save_checkpoint(ToyVLM(CFG, seed=4), str(tmp_path / "b"))
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_checkpoint_missing_version_rejected(tmp_path, model):
    path = str(tmp_path / "ckpt")
    save_checkpoint(model, path)
    man = json.loads((tmp_path / "ckpt.json").read_text())
    del man["version"]
    (tmp_path / "ckpt.json").write_text(json.dumps(man))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch_rejected(tmp_path, model):
    path = str(tmp_path / "ckpt")
    save_checkpoint(model, path)
    man = json.loads((tmp_path / "ckpt.json").read_text())
    man["params"][0]["shape"] = [1, 1]
    (tmp_path / "ckpt.json").write_text(json.dumps(man))
    with pytest.raises(ValueError, match="shape"):
        load_checkpoint(path)
