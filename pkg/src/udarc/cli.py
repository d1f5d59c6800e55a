"""Command-line front end.

    udarc build-vocab|pretrain|train|eval|curve --config <path> [--key value ...]

The config file holds flat ``key = value`` lines with ``#`` comments;
``--key value`` flags override it and ``UDARC_SEED`` overrides ``seed``.
Every output lands under ``output_dir``.

Exit codes: 0 success, 2 config or input error, 3 checkpoint missing or not
matching the config, 4 numeric failure during a run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import checkpoint as ckpt_io
from .data import AlignmentError, ParseError, PassageCorpus, build_rc_dataset, load_passages, load_rc_file
from .evaluation import EvalConfig, evaluate, write_predictions, write_results
from .model import ConfigError, EncoderConfig, from_base, init_params
from .numerics import NumericError
from .tokenizer import InputError, Vocabulary, build_vocab, summarize
from .training import (
    TrainMode,
    TrainSchedule,
    Trainer,
    load_checkpoint,
    pretrain_mlm,
    save_checkpoint,
)

log = logging.getLogger("udarc")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_NUMERIC = 0, 2, 3, 4

MODEL_KEYS = tuple(f.name for f in fields(EncoderConfig) if f.name != "vocab_size")
SCHEDULE_KEYS = tuple(f.name for f in fields(TrainSchedule))


class ArtifactError(RuntimeError):
    """A checkpoint is missing or does not fit the configured model."""


@dataclass
class ExperimentConfig:
    output_dir: str = ""
    mode: str = "multi_task"
    # inputs
    source_file: list[str] = field(default_factory=list)
    source_format: str = "auto"
    target_file: str = ""
    eval_file: str = ""
    eval_format: str = "auto"
    pretrain_file: str = ""
    vocab_file: str = ""
    base_checkpoint: str = ""
    checkpoint: str = ""
    vocab_size: int = 4000
    # model
    hidden: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ff_dim: int = 256
    max_position: int = 512
    n_task_specific: int = 1
    dropout: float = 0.0
    gelu_approximate: bool = False
    tie_mlm_weights: bool = False
    layer_norm_eps: float = 1e-12
    model_seed: int | None = None
    # training schedule
    total_steps: int | None = None
    rc_lm_ratio: int = 10
    batch_size: int = 32
    learning_rate: float = 5e-5
    warmup_proportion: float = 0.1
    epochs: int = 3
    seed: int = 0
    decay: str = "linear"
    clip_norm: float | None = 1.0
    lm_max_len: int = 384
    pretrain_steps: int = 0
    pretrain_learning_rate: float | None = None
    pretrain_max_len: int = 512
    mask_select_prob: float = 0.15
    mask_mask_prob: float = 0.8
    mask_random_prob: float = 0.1
    # base-model pretraining (the pretrain command)
    base_steps: int = 1000
    base_learning_rate: float = 1e-4
    base_max_len: int = 128
    # features and decoding
    max_len: int = 384
    stride: int = 128
    max_answer_len: int = 30
    n_best: int = 20
    eval_batch_size: int = 32
    # learning-curve sweep
    sweep_axis: str = "passages"
    sweep: list[int] = field(default_factory=list)

    # -- derived paths --------------------------------------------------------

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def vocab_path(self) -> Path:
        return Path(self.vocab_file) if self.vocab_file else self.out / "vocab.txt"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.out / "checkpoints" / "final.ckpt"

    # -- conversions ----------------------------------------------------------

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        cfg = EncoderConfig(vocab_size=vocab_size, **{k: getattr(self, k) for k in MODEL_KEYS})
        cfg.validate()
        return cfg

    def schedule(self) -> TrainSchedule:
        s = TrainSchedule(**{k: getattr(self, k) for k in SCHEDULE_KEYS})
        s.validate()
        return s

    def eval_config(self) -> EvalConfig:
        return EvalConfig(self.max_len, self.stride, self.max_answer_len, self.n_best, self.eval_batch_size)

    @property
    def init_seed(self) -> int:
        return self.seed if self.model_seed is None else self.model_seed


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _convert(name: str, kind: str, raw: str):
    """Read ``raw`` as the annotated type ``kind`` (a string, given postponed annotations)."""
    text = raw.strip()
    base = kind.replace(" | None", "")
    if base != kind and text.lower() in ("", "none", "null"):
        return None
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "bool":
            return _BOOL[text.lower()]
        if base == "list[int]":
            return [int(x) for x in text.split(",") if x.strip()]
        if base == "list[str]":
            return [x.strip() for x in text.split(",") if x.strip()]
    except (ValueError, KeyError):
        raise ConfigError(f"config field {name!r}: cannot read {raw!r} as {base}") from None
    return text


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def read_config_file(path) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``--key value`` and ``--key=value`` pairs left over by argparse."""
    values: dict[str, str] = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {tok} needs a value")
            value = tokens[i + 1]
            i += 2
        values[key.replace("-", "_")] = value
    return values


def build_config(raw: dict[str, str], env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    raw = dict(raw)
    if env.get("UDARC_SEED"):
        raw["seed"] = env["UDARC_SEED"]
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    values = {k: _convert(k, _FIELD_TYPES[k], v) for k, v in raw.items()}
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------


def _need(cfg: ExperimentConfig, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name):
            raise ConfigError(f"config field {name!r} is required for this command")


def _need_files(cfg: ExperimentConfig, *names: str) -> None:
    for name in names:
        value = getattr(cfg, name)
        for p in value if isinstance(value, list) else [value]:
            if p and not Path(p).is_file():
                raise InputError(f"config field {name!r}: file not found: {p}")


def _validate_mode(cfg: ExperimentConfig, mode: TrainMode) -> None:
    if mode is TrainMode.NO_ADAPT:
        if cfg.target_file:
            log.warning("mode no_adapt ignores target_file %s; its passages are not used", cfg.target_file)
        return
    if not cfg.target_file:
        raise ConfigError(f"config field 'target_file' is required for mode {mode.value}")
    if mode is TrainMode.SEQUENTIAL and cfg.pretrain_steps == 0:
        log.warning("mode sequential with pretrain_steps = 0 skips adaptation and trains like no_adapt")


def _load_vocab(cfg: ExperimentConfig) -> Vocabulary:
    if not cfg.vocab_path.is_file():
        raise InputError(f"vocabulary file not found: {cfg.vocab_path} (run build-vocab first)")
    return Vocabulary.load(cfg.vocab_path)


def _load_sources(cfg: ExperimentConfig):
    examples = []
    for path in cfg.source_file:
        examples.extend(load_rc_file(path, cfg.source_format))
    if not examples:
        raise InputError("the source files contain no examples")
    return examples


def _check_model_matches(cfg: ExperimentConfig, found: EncoderConfig, vocab: Vocabulary, what: str,
                         ignore: tuple[str, ...] = ()) -> None:
    if found.vocab_size != len(vocab):
        raise ArtifactError(f"{what} has vocab_size {found.vocab_size} but the vocabulary has {len(vocab)} entries")
    for key in MODEL_KEYS:
        if key in ignore:
            continue
        if getattr(found, key) != getattr(cfg, key):
            raise ArtifactError(f"{what} has {key}={getattr(found, key)!r} but the config says {getattr(cfg, key)!r}")


def _load_ckpt(path: Path, what: str):
    if not path.is_file():
        raise ArtifactError(f"{what} not found: {path}")
    return load_checkpoint(path)


def _initial_params(cfg: ExperimentConfig, vocab: Vocabulary):
    model_cfg = cfg.encoder_config(len(vocab))
    if not cfg.base_checkpoint:
        return init_params(model_cfg, cfg.init_seed)
    base, _, _ = _load_ckpt(Path(cfg.base_checkpoint), "base checkpoint")
    _check_model_matches(cfg, base.config, vocab, "base checkpoint", ignore=("n_task_specific",))
    if base.config.n_task_specific != 0:
        raise ArtifactError("base checkpoint must be an unpartitioned model (n_task_specific = 0)")
    return from_base(base, cfg.n_task_specific, cfg.init_seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_build_vocab(cfg: ExperimentConfig) -> int:
    _need(cfg, "output_dir")
    _need_files(cfg, "source_file", "target_file", "pretrain_file")
    if not (cfg.source_file or cfg.target_file or cfg.pretrain_file):
        raise ConfigError("build-vocab needs at least one of source_file, target_file, pretrain_file")
    texts: list[str] = []
    for ex in (_load_sources(cfg) if cfg.source_file else []):
        texts.extend((ex.query, ex.passage))
    for name in ("target_file", "pretrain_file"):
        path = getattr(cfg, name)
        if path:
            passages = _read_passages(path, name)
            texts.extend(passages.passages)
    vocab = build_vocab(texts, cfg.vocab_size)
    cfg.out.mkdir(parents=True, exist_ok=True)
    vocab.save(cfg.vocab_path)
    s = summarize(vocab)
    print(f"vocab size {s.size}: {s.num_chars} characters, {s.num_words} words, {s.num_suffixes} suffix pieces")
    print(f"wrote {cfg.vocab_path}")
    return EXIT_OK


def _read_passages(path: str, name: str) -> PassageCorpus:
    try:
        return load_passages(path)
    except ValueError as exc:
        raise InputError(f"config field {name!r}: {exc}") from None


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    _need(cfg, "output_dir", "pretrain_file")
    _need_files(cfg, "pretrain_file")
    vocab = _load_vocab(cfg)
    corpus = _read_passages(cfg.pretrain_file, "pretrain_file")
    model_cfg = replace(cfg.encoder_config(len(vocab)), n_task_specific=0)
    schedule = replace(cfg.schedule(), learning_rate=cfg.base_learning_rate, lm_max_len=cfg.base_max_len)
    cfg.out.mkdir(parents=True, exist_ok=True)
    log_path = cfg.out / "pretrain_metrics.jsonl"
    log_path.write_text("")
    params = init_params(model_cfg, cfg.init_seed)
    result = pretrain_mlm(params, corpus, vocab, cfg.base_steps, schedule, log_path)
    out = cfg.out / "base.ckpt"
    save_checkpoint(result.params, out, meta={"kind": "base", "steps": cfg.base_steps})
    print(f"final pretraining loss {result.log[-1]['loss']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def _train(cfg: ExperimentConfig, mode: TrainMode, vocab: Vocabulary, examples, corpus, out_dir: Path):
    params = _initial_params(cfg, vocab)
    feats = build_rc_dataset(examples, vocab, cfg.max_len, cfg.stride)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    log_path.write_text("")
    trainer = Trainer(params, mode, cfg.schedule(), feats, vocab,
                      corpus if mode is not TrainMode.NO_ADAPT else None, log_path)
    result = trainer.run()
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    trainer.save(out_dir / "checkpoints" / "final.ckpt")
    return trainer, result


def cmd_train(cfg: ExperimentConfig) -> int:
    _need(cfg, "output_dir", "source_file")
    mode = TrainMode.parse(cfg.mode)
    _validate_mode(cfg, mode)
    _need_files(cfg, "source_file", "target_file", "base_checkpoint")
    cfg.schedule()
    vocab = _load_vocab(cfg)
    cfg.encoder_config(len(vocab))
    examples = _load_sources(cfg)
    corpus = _read_passages(cfg.target_file, "target_file") if mode is not TrainMode.NO_ADAPT else None
    _, result = _train(cfg, mode, vocab, examples, corpus, cfg.out)
    rc = [r["loss"] for r in result.log if r["task"] == "rc"]
    print(f"{result.rc_updates} RC updates, {result.lm_updates} LM updates")
    print(f"final train loss {rc[-1]:.4f}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig) -> int:
    _need(cfg, "output_dir", "eval_file")
    _need_files(cfg, "eval_file")
    vocab = _load_vocab(cfg)
    examples = load_rc_file(cfg.eval_file, cfg.eval_format)
    params, _, _ = _load_ckpt(cfg.checkpoint_path, "checkpoint")
    _check_model_matches(cfg, params.config, vocab, "checkpoint")
    result, preds = evaluate(params, examples, vocab, cfg.eval_config())
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_predictions(cfg.out / "predictions.jsonl", preds)
    write_results(cfg.out / "results.json", result)
    print(result.summary())
    return EXIT_OK


def cmd_curve(cfg: ExperimentConfig) -> int:
    _need(cfg, "output_dir", "source_file", "eval_file", "sweep")
    if cfg.sweep_axis not in ("passages", "source"):
        raise ConfigError(f"config field 'sweep_axis' must be 'passages' or 'source', got {cfg.sweep_axis!r}")
    if any(x < 0 for x in cfg.sweep):
        raise ConfigError("config field 'sweep' must hold non-negative counts")
    mode = TrainMode.parse(cfg.mode)
    _validate_mode(cfg, mode)
    _need_files(cfg, "source_file", "target_file", "eval_file", "base_checkpoint")
    cfg.schedule()
    vocab = _load_vocab(cfg)
    cfg.encoder_config(len(vocab))
    examples = _load_sources(cfg)
    eval_examples = load_rc_file(cfg.eval_file, cfg.eval_format)
    corpus = _read_passages(cfg.target_file, "target_file") if cfg.target_file else None

    cfg.out.mkdir(parents=True, exist_ok=True)
    out_csv = cfg.out / "curve.csv"
    with out_csv.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "em", "f1"])
        for x in cfg.sweep:
            point_mode, point_src, point_corpus = mode, examples, corpus
            if cfg.sweep_axis == "passages":
                point_corpus = corpus.head(x) if corpus is not None and x > 0 else None
                if point_corpus is None:
                    point_mode = TrainMode.NO_ADAPT
            else:
                point_src = examples[:x]
            try:
                if not point_src:
                    raise ConfigError("no source examples at this sweep point")
                trainer, _ = _train(cfg, point_mode, vocab, point_src, point_corpus, cfg.out / "curve" / f"x{x}")
                res, _ = evaluate(trainer.params, eval_examples, vocab, cfg.eval_config())
                em, f1 = res.as_percent()
                log.info("sweep point %d: %s", x, res.summary())
            except (ConfigError, NumericError, ValueError) as exc:
                log.error("sweep point %d failed: %s", x, exc)
                em = f1 = math.nan
            writer.writerow([x, f"{em:.4f}", f"{f1:.4f}"])
            fh.flush()
    print(f"wrote {out_csv}")
    return EXIT_OK


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "curve": cmd_curve,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="udarc", description=__doc__.split("\n\n")[0],
                                     epilog="Any config field can be given as --field value.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        raw = read_config_file(args.config) if args.config else {}
        raw.update(parse_overrides(rest))
        cfg = build_config(raw)
        return COMMANDS[args.command](cfg)
    except (ConfigError, InputError, ParseError, AlignmentError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArtifactError, ckpt_io.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
