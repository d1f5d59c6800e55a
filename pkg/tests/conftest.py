import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from udarc.data import build_rc_dataset  # noqa: E402
from udarc.model import EncoderConfig, init_params  # noqa: E402
from udarc.synthetic import make_domain, make_passages, make_rc_examples  # noqa: E402
from udarc.tokenizer import build_vocab  # noqa: E402


class Tiny:
    """A small source RC set plus target passages, shared by training tests."""

    def __init__(self, n_examples=12, n_passages=12, hidden=16, num_layers=2, n_task_specific=1, seed=0):
        source, target = make_domain("source"), make_domain("target")
        rng = np.random.default_rng(seed)
        self.examples = make_rc_examples(source, n_examples, rng)
        self.corpus = make_passages(target, n_passages, rng)
        texts = [e.query + " " + e.passage for e in self.examples] + self.corpus.passages
        self.vocab = build_vocab(texts, 150)
        self.features = build_rc_dataset(self.examples, self.vocab, 32, 16)
        self.config = EncoderConfig(vocab_size=len(self.vocab), hidden=hidden, num_layers=num_layers, num_heads=2,
                                    ff_dim=2 * hidden, max_position=64, n_task_specific=n_task_specific)

    def params(self, seed=0):
        return init_params(self.config, seed)


@pytest.fixture(scope="session")
def tiny():
    return Tiny()


# --- acceptance report ------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def report(number: int, title: str, ok: bool, detail: str = "") -> None:
    """Record and print one pass/fail line for an acceptance criterion."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
