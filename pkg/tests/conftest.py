import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cfx.qa_head import QUERY_KINDS, ROLES, make_query  # noqa: E402
from cfx.synth import SynthConfig, generate_synthetic  # noqa: E402
from cfx.tokenizer import build_vocab  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SynthConfig(n_counterfactual=60, n_declarative=60, n_extraction=80, seed=5))


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    s1, s2 = small_corpus
    queries = [make_query(r, k).text for r in ROLES for k in QUERY_KINDS]
    return build_vocab([r.sentence for r in s1 + s2] + queries, 300)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
