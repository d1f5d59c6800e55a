"""Dataset parsing and construction of RC, LM and NSP training instances."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tokenizer import (
    CLS_ID,
    LM_ID,
    MASK_ID,
    NUM_SPECIALS,
    PAD_ID,
    SEP_ID,
    Vocabulary,
    tokenize,
)

IGNORE_LABEL = -1


class ParseError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass
class RCExample:
    id: str
    passage: str
    query: str
    gold_answers: list[tuple[str, int]]

    def __post_init__(self):
        if not self.query.strip():
            raise ParseError(f"example {self.id}: empty query")
        for text, start in self.gold_answers:
            if self.passage[start:start + len(text)] != text:
                raise AlignmentError(f"example {self.id}: answer {text!r} not found at char {start}")

    @property
    def answer_texts(self) -> list[str]:
        return [t for t, _ in self.gold_answers]


@dataclass
class PassageCorpus:
    passages: list[str]

    def __post_init__(self):
        for i, p in enumerate(self.passages):
            if not p.strip():
                raise ParseError(f"passage {i} is empty")

    def __len__(self) -> int:
        return len(self.passages)

    def head(self, n: int) -> "PassageCorpus":
        return PassageCorpus(self.passages[:n])


@dataclass
class RCFeature:
    example_id: str
    input_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    start_position: int
    end_position: int
    window_offset: int
    passage_start: int
    token_spans: list[tuple[int, int]]

    @property
    def passage_end(self) -> int:
        """Inclusive index of the last passage token in this window (passage_start - 1 if none)."""
        return self.passage_start + len(self.token_spans) - 1

    @property
    def has_answer(self) -> bool:
        return self.start_position != 0


@dataclass
class LMFeature:
    input_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_labels: np.ndarray


@dataclass
class NSPPairFeature:
    input_ids: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_labels: np.ndarray
    is_next: bool


@dataclass(frozen=True)
class MaskingConfig:
    select_prob: float = 0.15
    mask_prob: float = 0.8
    random_prob: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.select_prob <= 1.0:
            raise ValueError("select_prob must be in [0, 1]")
        if self.mask_prob < 0 or self.random_prob < 0 or self.mask_prob + self.random_prob > 1.0:
            raise ValueError("mask_prob and random_prob must be nonnegative and sum to at most 1")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _read_text(source) -> str:
    if hasattr(source, "read"):
        data = source.read()
        return data.decode("utf-8") if isinstance(data, bytes) else data
    return Path(source).read_text(encoding="utf-8")


def _require(obj, key, path, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{path}: missing key {key!r}")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        names = "/".join(k.__name__ for k in kind) if isinstance(kind, tuple) else kind.__name__
        raise ParseError(f"{path}.{key}: expected {names}, got {type(value).__name__}")
    return value


def parse_squad(source) -> list[RCExample]:
    """SQuAD v1.1 JSON: one example per question, all answers kept."""
    try:
        root = json.loads(_read_text(source))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    examples = []
    for ai, article in enumerate(_require(root, "data", "$", list)):
        apath = f"data[{ai}]"
        for pi, para in enumerate(_require(article, "paragraphs", apath, list)):
            ppath = f"{apath}.paragraphs[{pi}]"
            context = _require(para, "context", ppath, str)
            for qi, qa in enumerate(_require(para, "qas", ppath, list)):
                qpath = f"{ppath}.qas[{qi}]"
                qid = str(_require(qa, "id", qpath, (str, int)))
                question = _require(qa, "question", qpath, str)
                golds = []
                for ni, ans in enumerate(_require(qa, "answers", qpath, list)):
                    npath = f"{qpath}.answers[{ni}]"
                    text = _require(ans, "text", npath, str)
                    start = _require(ans, "answer_start", npath, int)
                    if context[start:start + len(text)] != text:
                        raise AlignmentError(f"example {qid}: answer {text!r} not found at char {start} ({npath})")
                    golds.append((text, start))
                if not golds:
                    raise ParseError(f"{qpath}: no answers")
                examples.append(RCExample(qid, context, question, golds))
    return examples


def parse_mrqa(source) -> list[RCExample]:
    """MRQA line format: a header record, then one context record per line.

    Character spans are inclusive on both ends, as in the MRQA release.
    """
    lines = _read_text(source).split("\n")
    examples = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        path = f"line {ln}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
        context = _require(rec, "context", path, str)
        for qi, qa in enumerate(_require(rec, "qas", path, list)):
            qpath = f"{path}.qas[{qi}]"
            qid = str(_require(qa, "qid", qpath, (str, int)))
            question = _require(qa, "question", qpath, str)
            golds: list[tuple[str, int]] = []
            for di, det in enumerate(_require(qa, "detected_answers", qpath, list)):
                dpath = f"{qpath}.detected_answers[{di}]"
                text = _require(det, "text", dpath, str)
                for si, span in enumerate(_require(det, "char_spans", dpath, list)):
                    if not (isinstance(span, list) and len(span) == 2 and all(isinstance(v, int) for v in span)):
                        raise ParseError(f"{dpath}.char_spans[{si}]: expected [start, end]")
                    s, e = span
                    found = context[s:e + 1]
                    if s < 0 or e < s or e >= len(context) or found.lower() != text.lower():
                        raise AlignmentError(f"example {qid}: answer {text!r} not found at chars {s}..{e} ({dpath})")
                    if (found, s) not in golds:
                        golds.append((found, s))
            if not golds:
                raise ParseError(f"{qpath}: no detected answers")
            examples.append(RCExample(qid, context, question, golds))
    return examples


def load_rc_file(path, fmt: str = "auto") -> list[RCExample]:
    """Parse ``path`` as ``squad`` or ``mrqa``; ``auto`` sniffs the first line."""
    if fmt == "auto":
        text = Path(path).read_text(encoding="utf-8")
        first = text.split("\n", 1)[0]
        try:
            header = json.loads(first)
            fmt = "mrqa" if isinstance(header, dict) and "data" not in header else "squad"
        except json.JSONDecodeError:
            fmt = "squad"
    if fmt == "squad":
        return parse_squad(path)
    if fmt == "mrqa":
        return parse_mrqa(path)
    raise ParseError(f"unknown RC file format {fmt!r}")


def load_passages(source) -> PassageCorpus:
    """One passage per line; blank lines are skipped."""
    return PassageCorpus([line.strip() for line in _read_text(source).split("\n") if line.strip()])


# ---------------------------------------------------------------------------
# Reading-comprehension features
# ---------------------------------------------------------------------------


def window_starts(num_tokens: int, capacity: int, stride: int) -> list[int]:
    """Start offsets of the passage windows.

    Windows advance by ``min(stride, capacity)`` so they never leave gaps,
    and stop once a window reaches the last passage token.
    """
    step = max(1, min(stride, capacity))
    starts = [0]
    while starts[-1] + capacity < num_tokens:
        starts.append(starts[-1] + step)
    return starts


def _pad(seq: list[int], length: int, value: int) -> np.ndarray:
    out = np.full(length, value, dtype=np.int64)
    out[:len(seq)] = seq
    return out


def answer_token_range(spans: Sequence[tuple[int, int]], char_start: int, char_end: int) -> tuple[int, int] | None:
    """First and last passage tokens overlapping ``[char_start, char_end)``."""
    hit = [i for i, (s, e) in enumerate(spans) if e > char_start and s < char_end]
    if not hit:
        return None
    return hit[0], hit[-1]


def build_rc_features(ex: RCExample, vocab: Vocabulary, max_len: int = 384, stride: int = 128) -> list[RCFeature]:
    """Windowed ``[CLS] query [SEP] passage-window [SEP]`` encodings of one example.

    Oversized queries keep their head so at least one passage token fits.
    Windows that miss the first gold answer get the (0, 0) target on [CLS].
    """
    if max_len < 4:
        raise ValueError("max_len must leave room for [CLS], [SEP], [SEP] and a passage token")
    query_ids = [tid for tid, _ in tokenize(ex.query, vocab)][:max_len - 4]
    passage = tokenize(ex.passage, vocab)
    p_ids = [tid for tid, _ in passage]
    p_spans = [(sp.char_start, sp.char_end) for _, sp in passage]
    capacity = max_len - len(query_ids) - 3
    answer = None
    if ex.gold_answers:
        text, start = ex.gold_answers[0]
        answer = answer_token_range(p_spans, start, start + len(text))
    passage_start = len(query_ids) + 2
    features = []
    for offset in window_starts(len(p_ids), capacity, stride):
        window = p_ids[offset:offset + capacity]
        ids = [CLS_ID] + query_ids + [SEP_ID] + window + [SEP_ID]
        segments = [0] * passage_start + [1] * (len(window) + 1)
        start_pos = end_pos = 0
        if answer is not None and offset <= answer[0] and answer[1] < offset + len(window):
            start_pos = passage_start + answer[0] - offset
            end_pos = passage_start + answer[1] - offset
        features.append(RCFeature(
            example_id=ex.id,
            input_ids=_pad(ids, max_len, PAD_ID),
            segment_ids=_pad(segments, max_len, 0),
            attention_mask=_pad([1] * len(ids), max_len, 0),
            start_position=start_pos,
            end_position=end_pos,
            window_offset=offset,
            passage_start=passage_start,
            token_spans=p_spans[offset:offset + len(window)],
        ))
    return features


def build_rc_dataset(examples: Sequence[RCExample], vocab: Vocabulary, max_len: int = 384,
                     stride: int = 128) -> list[RCFeature]:
    return [f for ex in examples for f in build_rc_features(ex, vocab, max_len, stride)]


# ---------------------------------------------------------------------------
# Masked language modeling
# ---------------------------------------------------------------------------


def apply_mlm_mask(input_ids, maskable_positions, rng: np.random.Generator, vocab_size: int,
                   config: MaskingConfig = MaskingConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Select positions for prediction and corrupt them (mask / random / keep).

    Returns ``(masked_ids, labels)``; labels hold the original id at selected
    positions and -1 elsewhere.
    """
    ids = np.array(input_ids, dtype=np.int64, copy=True)
    labels = np.full(ids.shape, IGNORE_LABEL, dtype=np.int64)
    positions = np.asarray(maskable_positions, dtype=np.int64)
    if positions.size == 0:
        return ids, labels
    selected = positions[rng.random(positions.size) < config.select_prob]
    if selected.size == 0:
        return ids, labels
    labels[selected] = ids[selected]
    action = rng.random(selected.size)
    to_mask = selected[action < config.mask_prob]
    to_random = selected[(action >= config.mask_prob) & (action < config.mask_prob + config.random_prob)]
    ids[to_mask] = MASK_ID
    if to_random.size and vocab_size > NUM_SPECIALS:
        ids[to_random] = rng.integers(NUM_SPECIALS, vocab_size, size=to_random.size)
    return ids, labels


def lm_feature_from_ids(passage_ids: Sequence[int], vocab_size: int, max_len: int, rng: np.random.Generator,
                        config: MaskingConfig = MaskingConfig()) -> LMFeature:
    body = list(passage_ids[:max_len - 3])
    ids = [CLS_ID, LM_ID] + body + [SEP_ID]
    maskable = np.arange(2, 2 + len(body))
    masked, labels = apply_mlm_mask(_pad(ids, max_len, PAD_ID), maskable, rng, vocab_size, config)
    return LMFeature(
        input_ids=masked,
        segment_ids=np.zeros(max_len, dtype=np.int64),
        attention_mask=_pad([1] * len(ids), max_len, 0),
        mlm_labels=labels,
    )


def build_lm_feature(passage: str, vocab: Vocabulary, max_len: int = 384, rng: np.random.Generator | None = None,
                     config: MaskingConfig = MaskingConfig()) -> LMFeature:
    """One-segment ``[CLS] [LM] passage [SEP]`` instance; the passage is truncated to fit."""
    if not passage.strip():
        raise ValueError("passage must be non-empty")
    if rng is None:
        rng = np.random.default_rng()
    ids = [tid for tid, _ in tokenize(passage, vocab)]
    return lm_feature_from_ids(ids, len(vocab), max_len, rng, config)


# ---------------------------------------------------------------------------
# Sentence pairs for the sequential baseline
# ---------------------------------------------------------------------------

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def split_sentences(passage: str) -> list[str]:
    return [s for s in _SENTENCE_END.split(passage.strip()) if s]


def _fit_pair(a: list[int], b: list[int], max_len: int) -> tuple[list[int], list[int]]:
    room = max_len - 3
    if len(a) + len(b) <= room:
        return a, b
    keep_b = max(1, room - len(a))
    b = b[:keep_b]
    if len(a) + len(b) > room:
        a = a[len(a) + len(b) - room:]
    return a, b


def tokenize_sentences(corpus: PassageCorpus, vocab: Vocabulary) -> list[list[list[int]]]:
    """Token ids per sentence per passage (empty sentences dropped)."""
    out = []
    for p in corpus.passages:
        sents = [[tid for tid, _ in tokenize(s, vocab)] for s in split_sentences(p)]
        out.append([s for s in sents if s])
    return out


def nsp_pairs_from_sentences(sentences: list[list[list[int]]], vocab_size: int, max_len: int,
                             rng: np.random.Generator,
                             config: MaskingConfig = MaskingConfig()) -> Iterator[NSPPairFeature]:
    sources = [i for i, sents in enumerate(sentences) if len(sents) >= 2]
    if not sources:
        raise ValueError("NSP pairs need at least one passage with two or more sentences")
    others = [i for i, sents in enumerate(sentences) if sents]
    while True:
        pi = sources[int(rng.integers(len(sources)))]
        sents = sentences[pi]
        cut = int(rng.integers(1, len(sents)))
        a = [t for s in sents[:cut] for t in s]
        candidates = [i for i in others if i != pi]
        is_next = not candidates or rng.random() < 0.5
        if is_next:
            b = [t for s in sents[cut:] for t in s]
        else:
            osents = sentences[candidates[int(rng.integers(len(candidates)))]]
            first = int(rng.integers(len(osents)))
            b = [t for s in osents[first:] for t in s]
        a, b = _fit_pair(a, b, max_len)
        ids = [CLS_ID] + a + [SEP_ID] + b + [SEP_ID]
        segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
        maskable = np.concatenate([np.arange(1, 1 + len(a)), np.arange(len(a) + 2, len(a) + 2 + len(b))])
        masked, labels = apply_mlm_mask(_pad(ids, max_len, PAD_ID), maskable, rng, vocab_size, config)
        yield NSPPairFeature(
            input_ids=masked,
            segment_ids=_pad(segments, max_len, 0),
            attention_mask=_pad([1] * len(ids), max_len, 0),
            mlm_labels=labels,
            is_next=bool(is_next),
        )


def build_nsp_pairs(corpus: PassageCorpus, vocab: Vocabulary, max_len: int = 512,
                    rng: np.random.Generator | None = None,
                    config: MaskingConfig = MaskingConfig()) -> Iterator[NSPPairFeature]:
    """Endless stream of masked sentence-pair instances.

    Each pair splits a passage of two or more sentences at a random boundary:
    sentence run A is the part before it, B the part after. Half the time
    (when another passage exists) B is replaced by a run starting at a random
    sentence of a different passage. B is truncated from its end to fit.
    """
    if rng is None:
        rng = np.random.default_rng()
    return nsp_pairs_from_sentences(tokenize_sentences(corpus, vocab), len(vocab), max_len, rng, config)


@dataclass
class TokenizedCorpus:
    """Passages pre-tokenized once so LM steps only pay for masking."""

    ids: list[list[int]] = field(default_factory=list)

    @classmethod
    def from_corpus(cls, corpus: PassageCorpus, vocab: Vocabulary) -> "TokenizedCorpus":
        return cls([[tid for tid, _ in tokenize(p, vocab)] for p in corpus.passages])

    def __len__(self) -> int:
        return len(self.ids)
