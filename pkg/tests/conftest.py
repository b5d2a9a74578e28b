import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conflict_rag.dataset import read_jsonl, stratified_split  # noqa: E402
from conflict_rag.synthetic import synthetic_corpus  # noqa: E402

DATA = Path(__file__).parent / "data"
GOLDEN = DATA / "golden"


@pytest.fixture(scope="session")
def corpus():
    return synthetic_corpus()


@pytest.fixture(scope="session")
def split(corpus):
    return stratified_split(corpus, seed=42)


@pytest.fixture(scope="session")
def golden_test_split():
    return read_jsonl(GOLDEN / "test.jsonl")


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
