"""Synthetic two-domain reading-comprehension task.

Both domains share every template and question word but draw their content
words (cities, foods, people, animals) from disjoint invented vocabularies.
RC passages are bare lists ("we saw X , Y , Z and W .") and the question
names a category, so answering needs to know which category each word
belongs to. That knowledge is only available from running text, where the
words appear in category-revealing contexts. Unlabeled target text therefore
carries exactly the knowledge a source-trained reader lacks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import PassageCorpus, RCExample

CATEGORIES = ("city", "food", "person", "animal")

_SENTENCES = (
    "{person} lives in the city of {city} .",
    "{person} likes to eat {food} .",
    "the {animal} ate some {food} .",
    "a person named {person} visited {city} .",
    "{person} keeps a pet {animal} .",
    "the {animal} ran to {city} .",
    "in {city} they cook {food} every day .",
    "{person} fed {food} to the {animal} .",
)

_DOMAIN_SYLLABLES = {
    "source": ("ka", "lo", "mi", "ne", "ru", "ta", "vo", "si"),
    "target": ("zu", "pe", "xo", "gi", "fa", "hu", "we", "bi"),
}


@dataclass
class Domain:
    name: str
    words: dict[str, list[str]]

    def all_words(self) -> list[str]:
        return [w for c in CATEGORIES for w in self.words[c]]


def make_domain(name: str, words_per_category: int = 10, seed: int = 7) -> Domain:
    """Invented content words; the two named domains use disjoint syllable sets."""
    syllables = _DOMAIN_SYLLABLES[name]
    rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
    seen: set[str] = set()
    words: dict[str, list[str]] = {}
    for cat in CATEGORIES:
        picked = []
        while len(picked) < words_per_category:
            w = "".join(syllables[int(i)] for i in rng.integers(len(syllables), size=3))
            if w not in seen:
                seen.add(w)
                picked.append(w)
        words[cat] = picked
    return Domain(name, words)


def _fill(template: str, domain: Domain, rng: np.random.Generator) -> str:
    slots = {c: domain.words[c][int(rng.integers(len(domain.words[c])))] for c in CATEGORIES}
    return template.format(**slots)


def make_passages(domain: Domain, n: int, rng: np.random.Generator, sentences: tuple[int, int] = (3, 6)) -> PassageCorpus:
    out = []
    for _ in range(n):
        k = int(rng.integers(sentences[0], sentences[1] + 1))
        out.append(" ".join(_fill(_SENTENCES[int(rng.integers(len(_SENTENCES)))], domain, rng) for _ in range(k)))
    return PassageCorpus(out)


def make_rc_examples(domain: Domain, n: int, rng: np.random.Generator, prefix: str | None = None) -> list[RCExample]:
    prefix = prefix or domain.name
    examples = []
    for k in range(n):
        order = rng.permutation(len(CATEGORIES))
        items = [(CATEGORIES[i], domain.words[CATEGORIES[i]][int(rng.integers(len(domain.words[CATEGORIES[i]])))])
                 for i in order]
        parts = ["we saw "]
        starts = {}
        for idx, (cat, word) in enumerate(items):
            if idx == len(items) - 1:
                parts.append(" and ")
            elif idx > 0:
                parts.append(" , ")
            starts[cat] = sum(len(p) for p in parts)
            parts.append(word)
        parts.append(" .")
        passage = "".join(parts)
        cat = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        answer = dict(items)[cat]
        examples.append(RCExample(f"{prefix}-{k}", passage, f"which {cat} was seen ?", [(answer, starts[cat])]))
    return examples


@dataclass
class ToyTask:
    source: Domain
    target: Domain
    source_train: list[RCExample]
    target_eval: list[RCExample]
    source_text: PassageCorpus
    target_text: PassageCorpus

    def vocab_corpus(self) -> list[str]:
        texts = list(self.source_text.passages) + list(self.target_text.passages)
        texts += [ex.query + " " + ex.passage for ex in self.source_train + self.target_eval]
        return texts


def make_toy_task(n_train: int = 200, n_eval: int = 100, n_source_text: int = 300, n_target_text: int = 300,
                  words_per_category: int = 10, seed: int = 0) -> ToyTask:
    source = make_domain("source", words_per_category)
    target = make_domain("target", words_per_category)
    rng = np.random.default_rng(seed)
    return ToyTask(
        source=source,
        target=target,
        source_train=make_rc_examples(source, n_train, rng),
        target_eval=make_rc_examples(target, n_eval, rng),
        source_text=make_passages(source, n_source_text, rng),
        target_text=make_passages(target, n_target_text, rng),
    )


def squad_payload(examples: list[RCExample]) -> dict:
    """SQuAD v1.1 structure with one paragraph per example."""
    paragraphs = [{"context": ex.passage,
                   "qas": [{"id": ex.id, "question": ex.query,
                            "answers": [{"text": t, "answer_start": s} for t, s in ex.gold_answers]}]}
                  for ex in examples]
    return {"version": "1.1", "data": [{"title": "toy", "paragraphs": paragraphs}]}


def write_toy_files(task: ToyTask, directory) -> dict[str, Path]:
    """Write the toy task as input files in the formats the CLI reads."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "source_file": d / "source_train.json",
        "eval_file": d / "target_eval.json",
        "target_file": d / "target_passages.txt",
        "pretrain_file": d / "source_passages.txt",
    }
    paths["source_file"].write_text(json.dumps(squad_payload(task.source_train)), encoding="utf-8")
    paths["eval_file"].write_text(json.dumps(squad_payload(task.target_eval)), encoding="utf-8")
    paths["target_file"].write_text("".join(p + "\n" for p in task.target_text.passages), encoding="utf-8")
    paths["pretrain_file"].write_text("".join(p + "\n" for p in task.source_text.passages), encoding="utf-8")
    return paths
