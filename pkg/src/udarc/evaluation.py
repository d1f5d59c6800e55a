"""Span decoding across windows and SQuAD-style EM / F1 scoring."""
from __future__ import annotations

import json
import math
import re
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import RCExample, RCFeature, build_rc_features
from .model import ModelParams, forward_rc
from .numerics import kernels
from .tokenizer import Vocabulary

_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


@dataclass
class Prediction:
    example_id: str
    answer_text: str
    score: float
    valid: bool = True
    nbest: list[tuple[str, float]] = field(default_factory=list)


@dataclass
class EvalResult:
    em: float
    f1: float
    n_examples: int
    per_example: list[tuple[str, float, float]]

    def as_percent(self) -> tuple[float, float]:
        return 100.0 * self.em, 100.0 * self.f1

    def summary(self) -> str:
        em, f1 = self.as_percent()
        return f"{em:.1f}/{f1:.1f}"


@dataclass(frozen=True)
class EvalConfig:
    max_len: int = 384
    stride: int = 128
    max_answer_len: int = 30
    n_best: int = 20
    batch_size: int = 32


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and the articles a/an/the, fold whitespace."""
    text = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _check_golds(golds: Sequence[str]) -> None:
    if not golds:
        raise ValueError("at least one gold answer is required")


def compute_em(pred: str, golds: Sequence[str]) -> float:
    _check_golds(golds)
    p = normalize_answer(pred)
    return float(any(p == normalize_answer(g) for g in golds))


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def compute_f1(pred: str, golds: Sequence[str]) -> float:
    _check_golds(golds)
    p = normalize_answer(pred).split()
    return max(_f1_single(p, normalize_answer(g).split()) for g in golds)


def _valid_range(feature: RCFeature) -> tuple[int, int]:
    return feature.passage_start, feature.passage_end


def decode_span(features: Sequence[RCFeature], start_logits: Sequence[np.ndarray], end_logits: Sequence[np.ndarray],
                passage: str, max_answer_len: int = 30, n_best: int = 20) -> Prediction:
    """Highest ``start + end`` score over all windows and valid pairs.

    Valid pairs lie inside the window's passage segment with
    ``start <= end`` and ``end - start < max_answer_len``. The search is
    exhaustive; ``n_best`` only bounds the ranked alternatives kept on the
    prediction. Ties keep the earliest window, then the earliest start/end.
    """
    if not features:
        raise ValueError("decode_span needs at least one window")
    best = (-math.inf, -1, -1, -1)
    for w, (feat, s, e) in enumerate(zip(features, start_logits, end_logits)):
        lo, hi = _valid_range(feat)
        score, i, j = kernels.best_span(np.ascontiguousarray(s, dtype=np.float64),
                                        np.ascontiguousarray(e, dtype=np.float64), lo, hi, max_answer_len)
        if i >= 0 and (best[1] < 0 or score > best[0]):
            best = (score, w, i, j)
    score, w, i, j = best
    ex_id = features[0].example_id
    if w < 0:
        return Prediction(ex_id, "", 0.0, valid=False)
    text = _span_text(features[w], i, j, passage)
    nbest = _nbest(features, start_logits, end_logits, passage, max_answer_len, n_best)
    return Prediction(ex_id, text, float(score), True, nbest)


def _span_text(feat: RCFeature, i: int, j: int, passage: str) -> str:
    a = feat.token_spans[i - feat.passage_start][0]
    b = feat.token_spans[j - feat.passage_start][1]
    return passage[a:b]


def _nbest(features, start_logits, end_logits, passage, max_answer_len, n_best) -> list[tuple[str, float]]:
    cands = []
    for feat, s, e in zip(features, start_logits, end_logits):
        lo, hi = _valid_range(feat)
        if hi < lo:
            continue
        ss = np.asarray(s[lo:hi + 1])
        ee = np.asarray(e[lo:hi + 1])
        n = ss.shape[0]
        scores = ss[:, None] + ee[None, :]
        off = np.arange(n)[None, :] - np.arange(n)[:, None]
        scores = np.where((off >= 0) & (off < max_answer_len), scores, -np.inf)
        flat = scores.ravel()
        k = min(n_best, int(np.isfinite(flat).sum()))
        top = np.argsort(-flat, kind="stable")[:k]
        for t in top:
            i, j = divmod(int(t), n)
            cands.append((float(flat[t]), _span_text(feat, lo + i, lo + j, passage)))
    cands.sort(key=lambda c: -c[0])
    return [(text, score) for score, text in cands[:n_best]]


def predict(params: ModelParams, examples: Sequence[RCExample], vocab: Vocabulary,
            config: EvalConfig = EvalConfig()) -> list[Prediction]:
    """One prediction per example, returned in input order.

    Windows are batched in (example id, window) order so the arithmetic does
    not depend on the order examples are given in.
    """
    by_id = {ex.id: ex for ex in examples}
    if len(by_id) != len(examples):
        raise ValueError("example ids must be unique")
    feats: dict[str, list[RCFeature]] = {}
    for ex_id in sorted(by_id):
        feats[ex_id] = build_rc_features(by_id[ex_id], vocab, config.max_len, config.stride)
    flat = [f for ex_id in sorted(feats) for f in feats[ex_id]]
    starts: dict[str, list[np.ndarray]] = defaultdict(list)
    ends: dict[str, list[np.ndarray]] = defaultdict(list)
    for lo in range(0, len(flat), config.batch_size):
        chunk = flat[lo:lo + config.batch_size]
        s, e = forward_rc(params, chunk)
        for k, f in enumerate(chunk):
            starts[f.example_id].append(s.data[k])
            ends[f.example_id].append(e.data[k])
    return [decode_span(feats[ex.id], starts[ex.id], ends[ex.id], ex.passage, config.max_answer_len, config.n_best)
            for ex in examples]


def score_predictions(examples: Sequence[RCExample], predictions: Sequence[Prediction]) -> EvalResult:
    per = []
    for ex, pred in zip(examples, predictions):
        golds = ex.answer_texts
        per.append((ex.id, compute_em(pred.answer_text, golds), compute_f1(pred.answer_text, golds)))
    n = len(per)
    em = math.fsum(p[1] for p in per) / n if n else 0.0
    f1 = math.fsum(p[2] for p in per) / n if n else 0.0
    return EvalResult(em, f1, n, per)


def evaluate(params: ModelParams, examples: Sequence[RCExample], vocab: Vocabulary,
             config: EvalConfig = EvalConfig()) -> tuple[EvalResult, list[Prediction]]:
    preds = predict(params, examples, vocab, config)
    return score_predictions(examples, preds), preds


def write_predictions(path, predictions: Sequence[Prediction]) -> None:
    """UTF-8 JSON lines ``{"id": ..., "answer_text": ..., "score": ...}`` in prediction order."""
    lines = [json.dumps({"id": p.example_id, "answer_text": p.answer_text, "score": p.score}, ensure_ascii=False)
             for p in predictions]
    Path(path).write_bytes(("".join(line + "\n" for line in lines)).encode("utf-8"))


def write_results(path, result: EvalResult) -> None:
    """One JSON object ``{"em": ..., "f1": ..., "n_examples": ...}``; em/f1 are percentages."""
    em, f1 = result.as_percent()
    rec = {"em": em, "f1": f1, "n_examples": result.n_examples}
    Path(path).write_bytes((json.dumps(rec) + "\n").encode("utf-8"))
