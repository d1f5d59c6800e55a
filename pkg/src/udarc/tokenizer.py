"""Subword vocabulary construction and greedy longest-match tokenization.

Text is lowercased for matching only; every token keeps half-open character
offsets into the original string so answer spans can be mapped back exactly.
"""
from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

PAD, UNK, CLS, SEP, MASK, LM = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[LM]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK, LM)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID, LM_ID = range(6)
NUM_SPECIALS = len(SPECIALS)
CONTINUATION = "##"
MAX_PRETOKEN_CHARS = 100


class InputError(ValueError):
    pass


class TokenSpan(NamedTuple):
    token_index: int
    char_start: int
    char_end: int


class Vocabulary:
    """Bijective token/id mapping with the six reserved specials at ids 0-5."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIALS]) != SPECIALS:
            raise InputError(f"vocabulary must start with {SPECIALS}")
        self.id_to_token = tokens
        self.token_to_id = {tok: i for i, tok in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            dupes = [t for t, c in Counter(tokens).items() if c > 1]
            raise InputError(f"duplicate vocabulary entries: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def specials(self) -> tuple[str, ...]:
        return SPECIALS

    def save(self, path) -> None:
        data = "".join(tok + "\n" for tok in self.id_to_token)
        Path(path).write_bytes(data.encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_bytes().decode("utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def _lower_char(ch: str) -> str:
    low = ch.lower()
    # Keep one character per source character so offsets stay aligned.
    return low if len(low) == 1 else ch


def pre_tokenize(text: str) -> list[tuple[str, int, int]]:
    """Split on whitespace; punctuation characters become their own pieces.

    Returns ``(lowercased piece, char_start, char_end)`` triples.
    """
    pieces = []
    start = None
    for i, ch in enumerate(text):
        if ch.isspace() or _is_punctuation(ch):
            if start is not None:
                pieces.append((start, i))
                start = None
            if not ch.isspace():
                pieces.append((i, i + 1))
        elif start is None:
            start = i
    if start is not None:
        pieces.append((start, len(text)))
    return [("".join(_lower_char(c) for c in text[s:e]), s, e) for s, e in pieces]


def build_vocab(corpus: Iterable[str], target_size: int) -> Vocabulary:
    """Frequency-ranked vocabulary of exactly ``target_size`` entries.

    Layout: specials, every single character seen (sorted), then whole words
    and ``##`` suffix pieces. Words take up to half of the remaining budget,
    suffix pieces fill the rest, and either tier absorbs leftover room if the
    other runs out. Ties break by length (longer first) and then
    lexicographically, so the result depends only on the corpus content.
    """
    words: Counter[str] = Counter()
    any_text = False
    for text in corpus:
        any_text = True
        for piece, _, _ in pre_tokenize(text):
            words[piece] += 1
    if not any_text or not words:
        raise InputError("cannot build a vocabulary from an empty corpus")
    chars = sorted({c for w in words for c in w})
    minimum = NUM_SPECIALS + len(chars)
    if target_size < minimum:
        raise InputError(f"target_size {target_size} is below the minimum {minimum} for this corpus")

    def ranked(counts: Counter[str]) -> list[str]:
        return [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], -len(kv[0]), kv[0]))]

    char_set = set(chars)
    word_rank = ranked(Counter({w: c for w, c in words.items() if len(w) > 1 and w not in char_set}))
    suffixes: Counter[str] = Counter()
    for w, c in words.items():
        for i in range(1, len(w)):
            suffixes[CONTINUATION + w[i:]] += c
    suffix_rank = ranked(suffixes)

    budget = target_size - minimum
    n_words = min(len(word_rank), budget // 2)
    n_suffix = min(len(suffix_rank), budget - n_words)
    n_words = min(len(word_rank), budget - n_suffix)
    tokens = list(SPECIALS) + chars + word_rank[:n_words] + suffix_rank[:n_suffix]
    if len(tokens) != target_size:
        raise InputError(f"corpus supports at most {len(tokens)} vocabulary entries, {target_size} requested")
    return Vocabulary(tokens)


def _segment(piece: str, vocab: Vocabulary) -> list[tuple[int, int, int]]:
    """Greedy longest-match of one lowercased pre-token: ``(id, start, end)`` offsets within it."""
    if len(piece) > MAX_PRETOKEN_CHARS:
        return [(UNK_ID, 0, len(piece))]
    out = []
    start = 0
    lookup = vocab.token_to_id
    while start < len(piece):
        prefix = CONTINUATION if start > 0 else ""
        match = None
        for end in range(len(piece), start, -1):
            tid = lookup.get(prefix + piece[start:end])
            if tid is not None:
                match = (tid, start, end)
                break
        if match is None:
            out.append((UNK_ID, start, len(piece)))
            break
        out.append(match)
        start = match[2]
    return out


def tokenize(text: str, vocab: Vocabulary) -> list[tuple[int, TokenSpan]]:
    out: list[tuple[int, TokenSpan]] = []
    for piece, s, _ in pre_tokenize(text):
        for tid, a, b in _segment(piece, vocab):
            out.append((tid, TokenSpan(len(out), s + a, s + b)))
    return out


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return [tid for tid, _ in tokenize(text, vocab)]


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    n = len(vocab)
    for i in ids:
        i = int(i)
        if not 0 <= i < n:
            raise IndexError(f"token id {i} not in vocabulary of size {n}")
        if i < NUM_SPECIALS:
            continue
        tok = vocab.id_to_token[i]
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


@dataclass(frozen=True)
class VocabSummary:
    size: int
    num_chars: int
    num_words: int
    num_suffixes: int


def summarize(vocab: Vocabulary) -> VocabSummary:
    body = vocab.id_to_token[NUM_SPECIALS:]
    chars = sum(1 for t in body if len(t) == 1)
    suffixes = sum(1 for t in body if t.startswith(CONTINUATION) and len(t) > len(CONTINUATION))
    return VocabSummary(len(vocab), chars, len(body) - chars - suffixes, suffixes)
