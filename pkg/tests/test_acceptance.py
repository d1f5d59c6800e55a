"""Acceptance suite: one test per criterion, each reporting a single pass/fail line.

Run with ``pytest tests/test_acceptance.py -v``; the criterion lines are repeated in
the terminal summary. The toy trend check (criterion 9) takes a couple of minutes.
"""
import time
from dataclasses import replace

import numpy as np
import pytest

import gradcases
import test_data
import test_evaluation
from conftest import report
from gradcheck import check
from udarc.data import build_rc_dataset, build_rc_features, RCExample
from udarc.evaluation import EvalConfig, compute_em, compute_f1, decode_span, evaluate, normalize_answer
from udarc.model import EncoderConfig, from_base, init_params
from udarc.synthetic import make_domain, make_passages, make_rc_examples, make_toy_task
from udarc.tokenizer import build_vocab
from udarc.training import TrainSchedule, Trainer, pretrain_mlm, train_multitask, train_no_adapt


def _same(a, b, names):
    return all(a[n].tobytes() == b[n].tobytes() for n in names)


# 1 -------------------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for name, factory in gradcases.ALL_CASES.items():
        for s in range(5):
            build, arrays = factory(np.random.default_rng([7, s]))
            worst[name] = max(worst.get(name, 0.0), check(build, arrays))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v <= 1e-4}
    ok = not bad and elapsed < 60
    report(1, "gradient suite", ok,
           f"{len(worst)} cases x 5 seeds, max rel err {max(worst.values()):.1e}, {elapsed:.1f}s")
    assert not bad, bad
    assert elapsed < 60


# 2 -------------------------------------------------------------------------------------


def test_criterion_2_scheduler(tiny):
    sched = TrainSchedule(total_steps=100, batch_size=2, learning_rate=1e-3, rc_lm_ratio=10, lm_max_len=24, seed=0)
    a = train_multitask(tiny.params(), tiny.features, tiny.corpus, sched, tiny.vocab)
    b = train_multitask(tiny.params(), tiny.features, tiny.corpus, replace(sched, rc_lm_ratio=1), tiny.vocab)
    ok = (a.rc_updates == 100 and a.lm_updates == 10 and a.lm_steps == list(range(10, 101, 10))
          and b.rc_updates == 100 and b.lm_updates == 100)
    report(2, "scheduler", ok, f"k=10: {a.rc_updates} RC / {a.lm_updates} LM; k=1: {b.rc_updates} RC / {b.lm_updates} LM")
    assert ok


# 3 -------------------------------------------------------------------------------------


def _watch(trainer, method, frozen_groups, changed_groups, violations, calls):
    """Wrap an update method so each call checks which parameter groups it touched."""
    inner = getattr(trainer, method)
    frozen = [n for g in frozen_groups for n in trainer.params.names(g)]
    changed = [n for g in changed_groups for n in trainer.params.names(g)]

    def wrapped(i, lr):
        before = trainer.params.snapshot()
        loss = inner(i, lr)
        after = trainer.params.snapshot()
        if not _same(before, after, frozen):
            violations.append((method, i))
        calls[method] = calls.get(method, 0) + 1
        # linear decay reaches lr 0 on the last step, so only positive-lr updates must move
        if lr > 0 and _same(before, after, changed):
            violations.append((method, i, "no change"))
        return loss

    setattr(trainer, method, wrapped)


def test_criterion_3_isolation(tiny):
    violations, calls = [], {}
    sched = TrainSchedule(total_steps=50, batch_size=4, learning_rate=1e-3, rc_lm_ratio=2, lm_max_len=32, seed=11)
    tr = Trainer(tiny.params(), "multi_task", sched, tiny.features, tiny.vocab, tiny.corpus)
    _watch(tr, "rc_update", ["lm"], ["shared", "rc"], violations, calls)
    _watch(tr, "lm_update", ["rc"], ["shared", "lm"], violations, calls)
    tr.run()
    # the sequential adaptation phase (MLM+NSP) must leave the RC group alone as well
    seq = Trainer(tiny.params(), "sequential", replace(sched, pretrain_steps=10, pretrain_max_len=32),
                  tiny.features, tiny.vocab, tiny.corpus)
    _watch(seq, "nsp_update", ["rc"], ["shared", "lm"], violations, calls)
    seq.run(max_iterations=10)
    expected = {"rc_update": 50, "lm_update": 25, "nsp_update": 10}
    ok = not violations and calls == expected
    report(3, "isolation", ok, f"updates checked {calls}, violations {len(violations)}")
    assert not violations, violations
    assert calls == expected


# 4 -------------------------------------------------------------------------------------


def test_criterion_4_clone_init(tiny):
    cfg = replace(tiny.config, n_task_specific=2)
    params = init_params(cfg, 3)
    rc = [n for n in params.names() if n.startswith("rc.")]
    equal_at_init = len(rc) == 24 and all(params[n].data.tobytes() == params["lm." + n[3:]].data.tobytes() for n in rc)
    tr = Trainer(params, "multi_task", TrainSchedule(total_steps=10, batch_size=4, lm_max_len=32, seed=0),
                 tiny.features, tiny.vocab, tiny.corpus)
    tr.lm_update(1, 1e-3)
    differ = [n for n in rc if tr.params[n].data.tobytes() != tr.params["lm." + n[3:]].data.tobytes()]
    ok = equal_at_init and len(differ) == len(rc)
    report(4, "clone init", ok, f"{len(rc)} cloned tensors equal at init, {len(differ)} differ after one LM step")
    assert equal_at_init
    assert len(differ) == len(rc)


# 5 -------------------------------------------------------------------------------------


def test_criterion_5_overfit():
    domain = make_domain("source")
    rng = np.random.default_rng(0)
    examples = make_rc_examples(domain, 8, rng)
    passages = make_passages(domain, 4, rng)
    vocab = build_vocab([e.query + " " + e.passage for e in examples] + passages.passages, 120)
    cfg = EncoderConfig(vocab_size=len(vocab), hidden=32, num_layers=2, num_heads=2, ff_dim=64, max_position=64)

    t0 = time.perf_counter()
    feats = build_rc_dataset(examples, vocab, 48, 32)
    rc = train_no_adapt(init_params(cfg, 0), feats,
                        TrainSchedule(total_steps=300, batch_size=8, learning_rate=3e-3, seed=0))
    res, _ = evaluate(rc.params, examples, vocab, EvalConfig(max_len=48, stride=32))
    rc_time = time.perf_counter() - t0

    mlm = pretrain_mlm(init_params(cfg, 0), passages, vocab, 500,
                       TrainSchedule(batch_size=8, learning_rate=3e-3, lm_max_len=64, seed=0))
    final_mlm = float(np.mean([r["loss"] for r in mlm.log[-10:]]))

    ok = res.em == 1.0 and rc_time < 60 and len(mlm.log) == 500 and final_mlm < 0.1
    report(5, "overfit smoke", ok,
           f"train EM {100 * res.em:.1f}% after 300 steps in {rc_time:.1f}s, MLM loss {final_mlm:.3f} after 500 steps")
    assert res.em == 1.0 and rc_time < 60
    assert final_mlm < 0.1


# 6 -------------------------------------------------------------------------------------


def test_criterion_6_metrics_and_decode():
    cases = test_evaluation.METRIC_CASES
    metric_ok = len(cases) >= 12 and all(
        compute_em(p, g) == em and compute_f1(p, g) == pytest.approx(f1, abs=1e-12) for p, g, em, f1 in cases)
    metric_ok = metric_ok and normalize_answer("The Cat.") == "cat"
    metric_ok = metric_ok and compute_f1("x y z", ["y z w"]) == pytest.approx(2 / 3, abs=1e-12)
    rng = np.random.default_rng(2024)
    agree = 0
    for _ in range(100):
        ex, feats, starts, ends = test_evaluation._random_instance(rng)
        assert max(f.input_ids.shape[0] for f in feats) <= 64
        max_answer_len = int(rng.integers(1, 31))
        pred = decode_span(feats, starts, ends, ex.passage, max_answer_len, n_best=5)
        text, score = test_evaluation.brute_force(feats, starts, ends, ex.passage, max_answer_len)
        agree += pred.answer_text == text and abs(pred.score - score) <= 1e-12
    ok = metric_ok and agree == 100
    report(6, "metric and decode oracles", ok, f"{len(cases)} hand cases, decode agrees on {agree}/100")
    assert metric_ok
    assert agree == 100


# 7 -------------------------------------------------------------------------------------


def test_criterion_7_data_pipeline():
    v = test_data.numbered_vocab()
    passage = " ".join(f"w{i}" for i in range(500))
    query = " ".join(f"w{i}" for i in range(10))
    ex = RCExample("long", passage, query, [("w300", passage.index("w300 "))])
    offsets = [f.window_offset for f in build_rc_features(ex, v, 384, 128)]
    windows_ok = offsets == [0, 128, 256] == test_data.window_oracle(500, 384 - 10 - 3, 128)

    failures = []
    for name in ("test_mask_stats_over_10k_positions", "test_fixture_answers_round_trip"):
        try:
            getattr(test_data, name)()
        except AssertionError as exc:
            failures.append(f"{name}: {exc}")
    ok = windows_ok and not failures
    report(7, "data pipeline", ok, f"window offsets {offsets}, mask stats and fixture round trip "
           + ("ok" if not failures else "failed"))
    assert windows_ok, offsets
    assert not failures, failures


# 8 -------------------------------------------------------------------------------------


def test_criterion_8_determinism_and_resume(tiny, tmp_path):
    sched = TrainSchedule(total_steps=100, batch_size=4, learning_rate=1e-3, rc_lm_ratio=10, lm_max_len=32, seed=5)

    def fresh(seed=0):
        return Trainer(tiny.params(seed), "multi_task", sched, tiny.features, tiny.vocab, tiny.corpus)

    blobs = []
    for k in range(2):
        tr = fresh()
        tr.run()
        tr.save(tmp_path / f"full{k}.ckpt")
        blobs.append((tmp_path / f"full{k}.ckpt").read_bytes())
    same_seed = blobs[0] == blobs[1]

    part = fresh()
    part.run(max_iterations=50)
    part.save(tmp_path / "half.ckpt")
    resumed = fresh(seed=99)  # restore must overwrite everything
    resumed.restore(tmp_path / "half.ckpt")
    resumed.run()
    resumed.save(tmp_path / "resumed.ckpt")
    resume_ok = (tmp_path / "resumed.ckpt").read_bytes() == blobs[0]

    ok = same_seed and resume_ok
    report(8, "determinism and resume", ok,
           f"same-seed checkpoints identical: {same_seed}, 50+50 equals 100: {resume_ok}")
    assert same_seed
    assert resume_ok


# 9 -------------------------------------------------------------------------------------

TREND_SEEDS = range(5)
TREND_LEN = 48


@pytest.mark.slow
def test_criterion_9_toy_adaptation_trend():
    t0 = time.perf_counter()
    task = make_toy_task()
    words = {w for text in task.vocab_corpus() for w in text.split()}
    vocab = build_vocab(task.vocab_corpus(), 6 + 30 + 2 * len(words))
    cfg = EncoderConfig(vocab_size=len(vocab), hidden=32, num_layers=2, num_heads=2, ff_dim=64, max_position=64,
                        n_task_specific=1, tie_mlm_weights=True)
    # the base model only ever sees source-domain text
    base = init_params(replace(cfg, n_task_specific=0), 0)
    pretrain_mlm(base, task.source_text, vocab, 1500,
                 TrainSchedule(batch_size=16, learning_rate=2e-3, lm_max_len=TREND_LEN, seed=0))

    feats = build_rc_dataset(task.source_train, vocab, TREND_LEN, 32)
    ec = EvalConfig(max_len=TREND_LEN, stride=32)
    scores = {"no_adapt": [], "multi_task": [], "sequential": []}
    for seed in TREND_SEEDS:
        sched = TrainSchedule(total_steps=600, batch_size=16, learning_rate=1e-3, lm_max_len=TREND_LEN, seed=seed,
                              rc_lm_ratio=2, pretrain_steps=300, pretrain_max_len=TREND_LEN,
                              pretrain_learning_rate=2e-3)
        for mode in scores:
            corpus = None if mode == "no_adapt" else task.target_text
            tr = Trainer(from_base(base, 1, seed), mode, sched, feats, vocab, corpus)
            tr.run()
            scores[mode].append(evaluate(tr.params, task.target_eval, vocab, ec)[0].f1)
    elapsed = time.perf_counter() - t0
    mean = {m: float(np.mean(v)) for m, v in scores.items()}
    ok = mean["multi_task"] >= mean["no_adapt"] and mean["sequential"] >= mean["no_adapt"] and elapsed < 600
    report(9, "toy adaptation trend", ok,
           "mean target F1 " + ", ".join(f"{m} {100 * v:.1f}" for m, v in mean.items()) + f", {elapsed:.0f}s")
    assert mean["multi_task"] >= mean["no_adapt"], scores
    assert mean["sequential"] >= mean["no_adapt"], scores
    assert elapsed < 600
