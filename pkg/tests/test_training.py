import json
import math
from dataclasses import replace

import numpy as np
import pytest

from udarc import numerics as nx
from udarc.checkpoint import CheckpointError
from udarc.model import ConfigError
from udarc.training import (
    AdamState,
    TrainMode,
    TrainSchedule,
    Trainer,
    adam_step,
    clip_grad_norm,
    lr_at_step,
    train_multitask,
    train_no_adapt,
    train_sequential,
)

SCHED = TrainSchedule(total_steps=20, batch_size=4, learning_rate=1e-3, rc_lm_ratio=5, lm_max_len=32,
                      pretrain_max_len=32, seed=3)


# --- learning-rate schedule ----------------------------------------------------


def test_lr_examples():
    s = TrainSchedule(total_steps=100, learning_rate=2.0, warmup_proportion=0.1)
    assert lr_at_step(s, 10) == 2.0
    assert lr_at_step(s, 5) == 1.0
    assert lr_at_step(s, 100) == 0.0
    assert lr_at_step(s, 55) == pytest.approx(1.0)
    const = replace(s, decay="constant")
    assert lr_at_step(const, 70) == 2.0


def test_lr_shape_properties():
    for n in (1, 7, 33, 250):
        for w in (0.0, 0.1, 0.37, 1.0):
            s = TrainSchedule(total_steps=n, learning_rate=1.0, warmup_proportion=w)
            lrs = [lr_at_step(s, i) for i in range(1, n + 1)]
            peak = int(np.argmax(lrs))
            assert lrs[-1] == 0.0 or (n == 1 or w == 1.0)
            assert all(a <= b for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
            assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1:]))
            assert max(lrs) <= 1.0


def test_schedule_validation_and_steps():
    with pytest.raises(ConfigError):
        TrainSchedule(rc_lm_ratio=0).validate()
    with pytest.raises(ConfigError):
        TrainSchedule(warmup_proportion=1.5).validate()
    with pytest.raises(ConfigError):
        TrainSchedule(mask_select_prob=2.0).validate()
    assert TrainSchedule(epochs=3, batch_size=32).steps_for(100) == 3 * math.ceil(100 / 32)
    assert TrainSchedule(total_steps=7).steps_for(100) == 7


# --- Adam --------------------------------------------------------------------------


class _Params:
    """Minimal stand-in exposing what adam_step needs."""

    def __init__(self, **arrays):
        self.tensors = {k: nx.Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}

    def __getitem__(self, k):
        return self.tensors[k]


def adam_oracle(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_matches_textbook_update():
    rng = np.random.default_rng(0)
    theta = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    p = _Params(w=theta.copy())
    state = AdamState()
    for g in grads:
        p["w"].grad = g.copy()
        adam_step(p, ["w"], state, 0.01, None)
    np.testing.assert_allclose(p["w"].data, adam_oracle(theta, grads, 0.01), rtol=1e-12, atol=1e-14)
    assert state.step == 5 and p["w"].grad is None


def test_adam_first_step_moves_by_lr_sign():
    g = np.array([0.3, -2.0, 1e-3])
    p = _Params(w=np.zeros(3))
    p["w"].grad = g.copy()
    adam_step(p, ["w"], AdamState(), 0.1, None)
    np.testing.assert_allclose(p["w"].data, -0.1 * np.sign(g), rtol=1e-4)


def test_adam_zero_grad_keeps_params_and_decays_moments():
    p = _Params(w=np.ones(2))
    state = AdamState()
    p["w"].grad = np.array([1.0, -1.0])
    adam_step(p, ["w"], state, 0.1, None)
    before = p["w"].data.copy()
    m_before = state.m["w"].copy()
    p["w"].grad = np.zeros(2)
    adam_step(p, ["w"], state, 0.0, None)
    np.testing.assert_array_equal(p["w"].data, before)
    np.testing.assert_allclose(state.m["w"], 0.9 * m_before)


def test_adam_missing_grad_is_contract_error():
    p = _Params(w=np.ones(2), u=np.ones(2))
    p["w"].grad = np.ones(2)
    with pytest.raises(nx.ContractError):
        adam_step(p, ["w", "u"], AdamState(), 0.1, None)


def test_clip_grad_norm():
    p = _Params(a=np.zeros(2), b=np.zeros(1))
    p["a"].grad = np.array([3.0, 0.0])
    p["b"].grad = np.array([4.0])
    norm = clip_grad_norm(p, ["a", "b"], 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(np.concatenate([p["a"].grad, p["b"].grad]), [0.6, 0.0, 0.8], rtol=1e-5)


# --- training loops ----------------------------------------------------------------


def test_multitask_step_accounting(tiny, tmp_path):
    log = tmp_path / "m.jsonl"
    res = train_multitask(tiny.params(), tiny.features, tiny.corpus, SCHED, tiny.vocab, log)
    assert res.rc_updates == 20 and res.lm_updates == 4 and res.lm_steps == [5, 10, 15, 20]
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(records) == 24
    assert all(set(r) == {"step", "mode", "task", "loss", "lr"} for r in records)
    assert [r["step"] for r in records if r["task"] == "lm"] == [5, 10, 15, 20]


def test_multitask_needs_corpus(tiny):
    with pytest.raises(ConfigError):
        Trainer(tiny.params(), "multi_task", SCHED, tiny.features, tiny.vocab, None)
    with pytest.raises(ConfigError):
        Trainer(tiny.params(), "no_adapt", SCHED, [])


def test_no_adapt_leaves_lm_group_untouched(tiny):
    params = tiny.params()
    before = params.snapshot("lm")
    res = train_no_adapt(params, tiny.features, SCHED)
    after = res.params.snapshot("lm")
    assert all(before[n].tobytes() == after[n].tobytes() for n in before)
    assert res.lm_updates == 0


def test_no_adapt_loss_decreases(tiny):
    sched = replace(SCHED, total_steps=60, learning_rate=3e-3)
    log = train_no_adapt(tiny.params(), tiny.features, sched).log
    assert np.mean([r["loss"] for r in log[-10:]]) < log[0]["loss"]


def test_sequential_phases(tiny, tmp_path):
    log = tmp_path / "s.jsonl"
    params = tiny.params()
    res = train_sequential(params, tiny.features, tiny.corpus, SCHED, tiny.vocab, pretrain_steps=6, log_path=log)
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["phase"] for r in records] == [1] * 6 + [2] * 20
    assert all(r["task"] == "lm" for r in records[:6]) and all(r["task"] == "rc" for r in records[6:])
    assert res.rc_updates == 20


def test_sequential_phase2_starts_from_adapted_weights(tiny):
    sched = replace(SCHED, pretrain_steps=4)
    tr = Trainer(tiny.params(), "sequential", sched, tiny.features, tiny.vocab, tiny.corpus)
    tr.run(max_iterations=4)
    assert tr.phase == 1 and tr.step == 4
    adapted = tr.params.snapshot()
    tr._begin_phase2()
    assert tr.phase == 2 and tr.step == 0 and tr.adam.step == 0
    for n in tr.params.names("shared"):
        assert tr.params[n].data.tobytes() == adapted[n].tobytes()
    for n in tr.params.names():
        if n.startswith("rc."):
            assert tr.params[n].data.tobytes() == adapted["lm." + n[3:]].tobytes()


def test_sequential_without_pretraining_equals_no_adapt(tiny):
    a = train_sequential(tiny.params(), tiny.features, tiny.corpus, SCHED, tiny.vocab, pretrain_steps=0).params
    b = train_no_adapt(tiny.params(), tiny.features, SCHED).params
    for n in a.names():
        assert a[n].data.tobytes() == b[n].data.tobytes()


def test_resume_mid_phase1(tiny, tmp_path):
    sched = replace(SCHED, pretrain_steps=6, total_steps=8)
    full = Trainer(tiny.params(), "sequential", sched, tiny.features, tiny.vocab, tiny.corpus)
    full.run()
    part = Trainer(tiny.params(), "sequential", sched, tiny.features, tiny.vocab, tiny.corpus)
    part.run(max_iterations=3)
    part.save(tmp_path / "mid.ckpt")
    resumed = Trainer(tiny.params(seed=99), "sequential", sched, tiny.features, tiny.vocab, tiny.corpus)
    resumed.restore(tmp_path / "mid.ckpt")
    resumed.run()
    for n in full.params.names():
        assert full.params[n].data.tobytes() == resumed.params[n].data.tobytes()


def test_restore_rejects_other_mode_or_schedule(tiny, tmp_path):
    tr = Trainer(tiny.params(), "no_adapt", SCHED, tiny.features)
    tr.run(max_iterations=2)
    tr.save(tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError):
        Trainer(tiny.params(), "multi_task", SCHED, tiny.features, tiny.vocab, tiny.corpus).restore(tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError):
        Trainer(tiny.params(), "no_adapt", replace(SCHED, seed=4), tiny.features).restore(tmp_path / "a.ckpt")


def test_dropout_training_is_deterministic(tiny):
    cfg = replace(tiny.config, dropout=0.1)
    from udarc.model import init_params

    runs = [train_multitask(init_params(cfg, 0), tiny.features, tiny.corpus, SCHED, tiny.vocab).params
            for _ in range(2)]
    for n in runs[0].names():
        assert runs[0][n].data.tobytes() == runs[1][n].data.tobytes()


def test_mode_parse():
    assert TrainMode.parse("MULTI-TASK") is TrainMode.MULTI_TASK
    with pytest.raises(ConfigError):
        TrainMode.parse("joint")
