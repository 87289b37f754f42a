import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from condctc.synthdata import GenConfig, generate_corpus  # noqa: E402

VERDICTS = {}


@pytest.fixture(scope="session")
def tiny_corpus():
    cfg = GenConfig(seed=3, n_tokens=3, dim=6, n_train_mono=12, n_train_cs=8, n_dev=4)
    return generate_corpus(cfg)


@pytest.fixture(scope="session")
def vocab(tiny_corpus):
    return tiny_corpus.vocab


@pytest.fixture
def verdict():
    """Record one acceptance line; it is printed now and again in the summary."""

    def record(number, title, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} [{detail}]"
        VERDICTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
