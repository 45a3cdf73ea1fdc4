"""Shared test configuration: acceptance-criterion result reporting."""

import sys

import pytest

sys.path.insert(0, __file__.rsplit("/", 1)[0])

_ACCEPTANCE_RESULTS: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def record_criterion():
    """Collect one pass/fail line per acceptance criterion for the summary."""

    def _record(number: int, description: str, passed: bool, detail: str = ""):
        _ACCEPTANCE_RESULTS[number] = (description, passed, detail)
        status = "PASS" if passed else "FAIL"
        print(f"[criterion {number}] {status}: {description}" + (f" ({detail})" if detail else ""))

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_RESULTS):
        description, passed, detail = _ACCEPTANCE_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:>2}: {status}  {description}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
