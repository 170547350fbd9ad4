import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import clustered_model, gaussian_model, word_model  # noqa: E402


@pytest.fixture(scope="session")
def square_model():
    from dxgate.embedding_store import EmbeddingModel

    return EmbeddingModel(("a", "b", "c", "d"), [[0, 0], [1, 0], [0, 1], [5, 5]], name="square")


@pytest.fixture(scope="session")
def words_model():
    return word_model()


@pytest.fixture(scope="session")
def gauss16():
    return gaussian_model(10000, 16, seed=1)


@pytest.fixture(scope="session")
def clustered():
    return clustered_model()


_CRITERION = re.compile(r"test_criterion_(\d+)_")
_acceptance: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = _CRITERION.match(item.name)
    if not m or item.module.__name__ != "test_acceptance":
        return
    n = int(m.group(1))
    if rep.skipped:
        reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
        _acceptance[n] = ("SKIP", reason.removeprefix("Skipped: "))
    elif rep.when == "call" or rep.failed:
        status = "PASS" if rep.passed else "FAIL"
        _acceptance[n] = (status, item.module.DETAILS.get(n, ""))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        status, detail = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
