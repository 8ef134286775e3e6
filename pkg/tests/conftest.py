import json
from pathlib import Path

import pytest

from k12bert.corpus import load_dictionary
from k12bert.tokenizer import Tokenizer, load_vocab

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def vocab():
    return load_vocab(FIXTURES / "vocab.txt")


@pytest.fixture(scope="session")
def tokenizer(vocab):
    return Tokenizer(vocab)


@pytest.fixture(scope="session")
def dictionary():
    return load_dictionary()


@pytest.fixture(scope="session")
def reference_encodings():
    with open(FIXTURES / "tokenizer_reference.jsonl", encoding="utf-8") as f:
        return [json.loads(line) for line in f]


@pytest.fixture(scope="session")
def template_sentences():
    return [s for s in (FIXTURES / "templates.txt").read_text(encoding="utf-8").splitlines() if s]


def write_vocab(path, tokens):
    path.write_text("\n".join(tokens) + "\n", encoding="utf-8")
    return path


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
