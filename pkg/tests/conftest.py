"""Shared pytest wiring: one-line pass/fail summary for the acceptance suite."""

import pytest

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def record_acceptance(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[f"criterion {criterion}"] = (passed, detail)


@pytest.fixture
def record():
    return record_acceptance


@pytest.hookimpl(trylast=True)
def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[1])):
        passed, detail = ACCEPTANCE_RESULTS[name]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {name}: {status} — {detail}")
