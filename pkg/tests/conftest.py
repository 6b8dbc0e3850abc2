from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


def label_files():
    return sorted((FIXTURES / "labels").glob("*.txt"))


def calib_files():
    return sorted((FIXTURES / "calib").glob("*.txt"))


def malformed_cases():
    cases = []
    for raw in (FIXTURES / "malformed.tsv").read_text().split("\n"):
        if not raw or raw.startswith("#"):
            continue
        err, line = raw.split("\t", 1)
        cases.append((err, line))
    return cases


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
