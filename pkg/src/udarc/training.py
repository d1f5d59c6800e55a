"""No-adaptation, sequential and multi-task training loops.

All randomness is drawn from generators keyed by ``(seed, stream, phase,
step)``, so a run resumed from a checkpoint replays exactly the batches,
masks and dropout draws of an uninterrupted run.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from . import numerics as nx
from .data import (
    LMFeature,
    MaskingConfig,
    PassageCorpus,
    RCFeature,
    TokenizedCorpus,
    lm_feature_from_ids,
    nsp_pairs_from_sentences,
    tokenize_sentences,
)
from .model import (
    ConfigError,
    EncoderConfig,
    ModelParams,
    forward_lm,
    forward_rc,
    lm_loss,
    nsp_loss,
    rc_loss,
    reclone_rc_layers,
)
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)

_RC_STREAM, _LM_STREAM, _NSP_STREAM, _DROPOUT_STREAM = 1, 2, 3, 4


class TrainMode(enum.Enum):
    NO_ADAPT = "no_adapt"
    SEQUENTIAL = "sequential"
    MULTI_TASK = "multi_task"

    @classmethod
    def parse(cls, value: "str | TrainMode") -> "TrainMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower().replace("-", "_"))
        except ValueError:
            raise ConfigError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}") from None


@dataclass(frozen=True)
class TrainSchedule:
    total_steps: int | None = None   # None: epochs * ceil(num RC features / batch_size)
    rc_lm_ratio: int = 10
    batch_size: int = 32
    learning_rate: float = 5e-5
    warmup_proportion: float = 0.1
    epochs: int = 3
    seed: int = 0
    decay: str = "linear"            # or "constant"
    clip_norm: float | None = 1.0
    lm_max_len: int = 384
    pretrain_steps: int = 0
    pretrain_learning_rate: float | None = None
    pretrain_max_len: int = 512
    mask_select_prob: float = 0.15
    mask_mask_prob: float = 0.8
    mask_random_prob: float = 0.1

    def validate(self) -> None:
        if self.rc_lm_ratio < 1:
            raise ConfigError(f"rc_lm_ratio must be >= 1, got {self.rc_lm_ratio}")
        if not 0.0 <= self.warmup_proportion <= 1.0:
            raise ConfigError(f"warmup_proportion must be in [0, 1], got {self.warmup_proportion}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.total_steps is not None and self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if self.pretrain_steps < 0:
            raise ConfigError("pretrain_steps must be >= 0")
        if self.decay not in ("linear", "constant"):
            raise ConfigError(f"decay must be 'linear' or 'constant', got {self.decay!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        self.masking()

    def masking(self) -> MaskingConfig:
        try:
            return MaskingConfig(self.mask_select_prob, self.mask_mask_prob, self.mask_random_prob)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def steps_for(self, num_features: int) -> int:
        if self.total_steps is not None:
            return self.total_steps
        return self.epochs * math.ceil(num_features / self.batch_size)

    def resolved(self, num_features: int) -> "TrainSchedule":
        return replace(self, total_steps=self.steps_for(num_features))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def lr_at_step(schedule: TrainSchedule, i: int, total: int | None = None, peak: float | None = None) -> float:
    """Linear warmup over ceil(warmup_proportion * N) steps, then linear decay to 0 at N."""
    n = total if total is not None else schedule.total_steps
    if n is None:
        raise ConfigError("lr_at_step needs a resolved total step count")
    peak = schedule.learning_rate if peak is None else peak
    warm = math.ceil(schedule.warmup_proportion * n)
    if warm > 0 and i <= warm:
        return peak * i / warm
    if schedule.decay == "constant" or n == warm:
        return peak
    return peak * max(0.0, (n - i) / (n - warm))


@dataclass
class AdamState:
    """Moments per parameter name. A parameter updated by both tasks keeps one history."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_grad_norm(params: ModelParams, names: Sequence[str], max_norm: float) -> float:
    total = math.sqrt(math.fsum(float(np.dot(params[n].grad.ravel(), params[n].grad.ravel())) for n in names))
    if total > max_norm > 0:
        factor = max_norm / (total + 1e-6)
        for n in names:
            params[n].grad *= factor
    return total


def adam_step(params: ModelParams, names: Sequence[str], state: AdamState, lr: float,
              clip_norm: float | None = None) -> None:
    """Bias-corrected Adam on exactly ``names``; their grads are cleared afterwards."""
    missing = [n for n in names if params[n].grad is None]
    if missing:
        raise nx.ContractError(f"adam_step: no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    if clip_norm is not None:
        clip_grad_norm(params, names, clip_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for n in names:
        p = params[n]
        g = p.grad
        if n not in state.m:
            state.m[n] = np.zeros_like(p.data)
            state.v[n] = np.zeros_like(p.data)
            state.counts[n] = 0
        t = state.counts[n] = state.counts[n] + 1
        m = state.m[n]
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
        p.grad = None


def _rng(seed: int, stream: int, phase: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, stream, phase, step])


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    rc_updates: int
    lm_updates: int
    lm_steps: list[int]


class Trainer:
    """Resumable driver for the three training modes.

    ``step`` counts loop iterations of the current phase. Sequential training
    runs phase 1 (MLM + NSP on target sentence pairs) and then phase 2
    (RC fine-tuning); the other modes only have phase 2.
    """

    def __init__(self, params: ModelParams, mode: TrainMode | str, schedule: TrainSchedule,
                 rc_features: Sequence[RCFeature], vocab: Vocabulary | None = None,
                 lm_corpus: PassageCorpus | None = None, log_path=None):
        self.mode = TrainMode.parse(mode)
        schedule.validate()
        if not rc_features:
            raise ConfigError("no RC training features")
        needs_corpus = self.mode is TrainMode.MULTI_TASK or (
            self.mode is TrainMode.SEQUENTIAL and schedule.pretrain_steps > 0)
        if needs_corpus and (lm_corpus is None or len(lm_corpus) == 0):
            raise ConfigError(f"mode {self.mode.value} needs a non-empty target passage corpus")
        if needs_corpus and vocab is None:
            raise ConfigError("a vocabulary is needed to tokenize the target corpus")
        self.params = params
        self.schedule = schedule.resolved(len(rc_features))
        self.rc_features = list(rc_features)
        self.vocab_size = params.config.vocab_size
        self.masking = schedule.masking()
        self.lm_ids = None
        self.sentences = None
        if self.mode is TrainMode.MULTI_TASK:
            self.lm_ids = TokenizedCorpus.from_corpus(lm_corpus, vocab).ids
        elif needs_corpus:
            self.sentences = tokenize_sentences(lm_corpus, vocab)
            if not any(len(s) >= 2 for s in self.sentences):
                raise ConfigError("sequential adaptation needs a target passage with two or more sentences")
        self.phase = 1 if self.mode is TrainMode.SEQUENTIAL and self.schedule.pretrain_steps > 0 else 2
        self.step = 0
        self.adam = AdamState()
        self.rc_updates = 0
        self.lm_updates = 0
        self.lm_steps: list[int] = []
        self.log: list[dict] = []
        self.log_path = Path(log_path) if log_path else None
        self._perm_cache: tuple[int, np.ndarray] | None = None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def phase_total(self) -> int:
        return self.schedule.pretrain_steps if self.phase == 1 else self.schedule.total_steps

    @property
    def finished(self) -> bool:
        return self.phase == 2 and self.step >= self.schedule.total_steps

    def _record(self, task: str, loss: float, lr: float) -> None:
        rec = {"step": self.step, "mode": self.mode.value, "task": task, "loss": loss, "lr": lr}
        if self.mode is TrainMode.SEQUENTIAL:
            rec["phase"] = self.phase
        self.log.append(rec)
        if self.log_path is not None:
            with self.log_path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(rec) + "\n")

    def _names(self, *groups: str, exclude: tuple[str, ...] = ()) -> list[str]:
        return [n for g in groups for n in self.params.names(g) if not n.startswith(exclude)]

    # -- batches -------------------------------------------------------------

    def _rc_batch(self, i: int) -> list[RCFeature]:
        n = len(self.rc_features)
        bs = min(self.schedule.batch_size, n)
        per_epoch = math.ceil(n / bs)
        epoch, slot = divmod(i - 1, per_epoch)
        if self._perm_cache is None or self._perm_cache[0] != epoch:
            self._perm_cache = (epoch, _rng(self.schedule.seed, _RC_STREAM, 2, epoch).permutation(n))
        idx = self._perm_cache[1][slot * bs:(slot + 1) * bs]
        return [self.rc_features[j] for j in idx]

    def _lm_batch(self, i: int) -> list[LMFeature]:
        rng = _rng(self.schedule.seed, _LM_STREAM, 2, i)
        picks = rng.integers(len(self.lm_ids), size=self.schedule.batch_size)
        return [lm_feature_from_ids(self.lm_ids[j], self.vocab_size, self.schedule.lm_max_len, rng, self.masking)
                for j in picks]

    def _nsp_batch(self, i: int):
        rng = _rng(self.schedule.seed, _NSP_STREAM, 1, i)
        stream = nsp_pairs_from_sentences(self.sentences, self.vocab_size, self.schedule.pretrain_max_len, rng,
                                          self.masking)
        return [next(stream) for _ in range(self.schedule.batch_size)]

    def _dropout_rng(self, i: int, task: int) -> np.random.Generator | None:
        if self.params.config.dropout <= 0:
            return None
        return _rng(self.schedule.seed, _DROPOUT_STREAM, self.phase * 4 + task, i)

    # -- updates -------------------------------------------------------------

    def rc_update(self, i: int, lr: float) -> float:
        batch = self._rc_batch(i)
        self.params.zero_grad()
        with nx.Tape() as tape:
            start, end = forward_rc(self.params, batch, self._dropout_rng(i, 0))
            loss = rc_loss(start, end, [f.start_position for f in batch], [f.end_position for f in batch])
        nx.backward(tape, loss)
        adam_step(self.params, self._names("shared", "rc"), self.adam, lr, self.schedule.clip_norm)
        self.rc_updates += 1
        return loss.item()

    def lm_update(self, i: int, lr: float) -> float:
        batch = self._lm_batch(i)
        self.params.zero_grad()
        with nx.Tape() as tape:
            logits, labels = forward_lm(self.params, batch, self._dropout_rng(i, 1))
            loss = lm_loss(logits, labels)
        names = self._names("shared", "lm", exclude=("nsp_head.",))
        if tape.produced(loss):
            nx.backward(tape, loss)
            adam_step(self.params, names, self.adam, lr, self.schedule.clip_norm)
        self.lm_updates += 1
        self.lm_steps.append(i)
        return loss.item()

    def nsp_update(self, i: int, lr: float) -> float:
        batch = self._nsp_batch(i)
        self.params.zero_grad()
        with nx.Tape() as tape:
            logits, labels, nsp = forward_lm(self.params, batch, self._dropout_rng(i, 2), with_nsp=True)
            loss = nx.add(lm_loss(logits, labels), nsp_loss(nsp, [f.is_next for f in batch])) if labels.size \
                else nsp_loss(nsp, [f.is_next for f in batch])
        nx.backward(tape, loss)
        adam_step(self.params, self._names("shared", "lm"), self.adam, lr, self.schedule.clip_norm)
        return loss.item()

    def _begin_phase2(self) -> None:
        reclone_rc_layers(self.params)
        self.phase = 2
        self.step = 0
        self.adam = AdamState()
        self._perm_cache = None
        log.info("sequential: adaptation phase done, starting RC fine-tuning")

    def run(self, max_iterations: int | None = None) -> TrainResult:
        """Advance training; stop after ``max_iterations`` loop iterations if given."""
        done = 0
        while not self.finished and (max_iterations is None or done < max_iterations):
            if self.phase == 1 and self.step >= self.schedule.pretrain_steps:
                self._begin_phase2()
                continue
            i = self.step + 1
            if self.phase == 1:
                peak = self.schedule.pretrain_learning_rate or self.schedule.learning_rate
                lr = lr_at_step(self.schedule, i, self.schedule.pretrain_steps, peak)
                loss = self.nsp_update(i, lr)
                self.step = i
                self._record("lm", loss, lr)
            else:
                lr = lr_at_step(self.schedule, i)
                loss = self.rc_update(i, lr)
                self.step = i
                self._record("rc", loss, lr)
                if self.mode is TrainMode.MULTI_TASK and i % self.schedule.rc_lm_ratio == 0:
                    self._record("lm", self.lm_update(i, lr), lr)
            done += 1
        return TrainResult(self.params, self.log, self.rc_updates, self.lm_updates, list(self.lm_steps))

    # -- checkpointing -------------------------------------------------------

    def state_meta(self) -> dict:
        return {
            "kind": "trainer",
            "mode": self.mode.value,
            "schedule": self.schedule.to_dict(),
            "phase": self.phase,
            "step": self.step,
            "rc_updates": self.rc_updates,
            "lm_updates": self.lm_updates,
            "lm_steps": self.lm_steps,
            "adam": {"step": self.adam.step, "counts": self.adam.counts, "beta1": self.adam.beta1,
                     "beta2": self.adam.beta2, "eps": self.adam.eps},
            "rng": {"kind": "keyed", "seed": self.schedule.seed},
        }

    def save(self, path) -> None:
        save_checkpoint(self.params, path, self.adam, meta=self.state_meta())

    def restore(self, path) -> None:
        """Load parameters and optimizer/progress state saved by :meth:`save`."""
        ck = ckpt_io.load(path)
        meta = ck.meta
        if meta.get("kind") != "trainer" or meta.get("mode") != self.mode.value:
            raise ckpt_io.CheckpointError("checkpoint was not written by a trainer in this mode")
        if TrainSchedule.from_dict(meta["schedule"]) != self.schedule:
            raise ckpt_io.CheckpointError("checkpoint schedule differs from this trainer's schedule")
        self.params = params_from_checkpoint(ck)
        self.adam = adam_from_checkpoint(ck)
        self.phase = meta["phase"]
        self.step = meta["step"]
        self.rc_updates = meta["rc_updates"]
        self.lm_updates = meta["lm_updates"]
        self.lm_steps = list(meta["lm_steps"])
        self._perm_cache = None


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def train_no_adapt(params: ModelParams, rc_data: Sequence[RCFeature], schedule: TrainSchedule,
                   log_path=None) -> TrainResult:
    return Trainer(params, TrainMode.NO_ADAPT, schedule, rc_data, log_path=log_path).run()


def train_multitask(params: ModelParams, rc_data: Sequence[RCFeature], lm_corpus: PassageCorpus,
                    schedule: TrainSchedule, vocab: Vocabulary, log_path=None) -> TrainResult:
    return Trainer(params, TrainMode.MULTI_TASK, schedule, rc_data, vocab, lm_corpus, log_path).run()


def train_sequential(params: ModelParams, rc_data: Sequence[RCFeature], lm_corpus: PassageCorpus,
                     schedule: TrainSchedule, vocab: Vocabulary, pretrain_steps: int | None = None,
                     pretrain_max_len: int | None = None, log_path=None) -> TrainResult:
    if pretrain_steps is not None:
        schedule = replace(schedule, pretrain_steps=pretrain_steps)
    if pretrain_max_len is not None:
        schedule = replace(schedule, pretrain_max_len=pretrain_max_len)
    return Trainer(params, TrainMode.SEQUENTIAL, schedule, rc_data, vocab, lm_corpus, log_path).run()


def pretrain_mlm(params: ModelParams, corpus: PassageCorpus, vocab: Vocabulary, steps: int,
                 schedule: TrainSchedule, log_path=None) -> TrainResult:
    """MLM-only training of the LM route on one-segment instances (base checkpoint creation)."""
    schedule = replace(schedule, total_steps=steps)
    schedule.validate()
    ids = TokenizedCorpus.from_corpus(corpus, vocab).ids
    if not ids:
        raise ConfigError("pretraining corpus is empty")
    masking = schedule.masking()
    adam = AdamState()
    records = []
    names = [n for n in params.names() if not n.startswith(("rc.", "rc_head.", "nsp_head."))]
    fh = Path(log_path).open("a", encoding="utf-8", newline="\n") if log_path else None
    try:
        for i in range(1, steps + 1):
            rng = _rng(schedule.seed, _LM_STREAM, 0, i)
            picks = rng.integers(len(ids), size=schedule.batch_size)
            batch = [lm_feature_from_ids(ids[j], len(vocab), schedule.lm_max_len, rng, masking) for j in picks]
            lr = lr_at_step(schedule, i)
            params.zero_grad()
            with nx.Tape() as tape:
                logits, labels = forward_lm(params, batch)
                loss = lm_loss(logits, labels)
            if tape.produced(loss):
                nx.backward(tape, loss)
                adam_step(params, names, adam, lr, schedule.clip_norm)
            rec = {"step": i, "mode": "pretrain", "task": "lm", "loss": loss.item(), "lr": lr}
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    return TrainResult(params, records, 0, steps, list(range(1, steps + 1)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path, optimizer: AdamState | None = None, step: int = 0,
                    meta: dict | None = None) -> None:
    arrays = {f"param/{n}": t.data for n, t in params.tensors.items()}
    if optimizer is not None:
        for n in optimizer.m:
            arrays[f"adam.m/{n}"] = optimizer.m[n]
            arrays[f"adam.v/{n}"] = optimizer.v[n]
    meta = dict(meta or {"kind": "params", "step": step})
    meta["param_order"] = list(params.tensors)
    if optimizer is not None and "adam" not in meta:
        meta["adam"] = {"step": optimizer.step, "counts": optimizer.counts, "beta1": optimizer.beta1,
                        "beta2": optimizer.beta2, "eps": optimizer.eps}
    ckpt_io.save(path, ckpt_io.Checkpoint(params.config.to_dict(), arrays, meta, params.manifest()))


def params_from_checkpoint(ck: ckpt_io.Checkpoint) -> ModelParams:
    config = EncoderConfig.from_dict(ck.config)
    order = ck.meta.get("param_order") or sorted(k[len("param/"):] for k in ck.arrays if k.startswith("param/"))
    tensors = {n: nx.Tensor(ck.arrays[f"param/{n}"], requires_grad=True, name=n) for n in order}
    return ModelParams(config, tensors)


def adam_from_checkpoint(ck: ckpt_io.Checkpoint) -> AdamState:
    info = ck.meta.get("adam")
    if info is None:
        return AdamState()
    state = AdamState(step=info["step"], beta1=info["beta1"], beta2=info["beta2"], eps=info["eps"])
    for n, c in info["counts"].items():
        state.counts[n] = c
        state.m[n] = ck.arrays[f"adam.m/{n}"].copy()
        state.v[n] = ck.arrays[f"adam.v/{n}"].copy()
    return state


def load_checkpoint(path) -> tuple[ModelParams, AdamState, dict]:
    ck = ckpt_io.load(path)
    return params_from_checkpoint(ck), adam_from_checkpoint(ck), ck.meta
