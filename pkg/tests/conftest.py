from __future__ import annotations

import pytest

ACCEPTANCE_LINES: list = []


@pytest.fixture
def record_criterion():
    def record(label: str, passed: bool, detail: str = "") -> str:
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}".rstrip(": ")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
