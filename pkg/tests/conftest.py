from __future__ import annotations

from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for marker in report.keywords:
        if marker.startswith("criterion_"):
            if report.skipped:
                outcome = "SKIP"
            elif report.passed:
                outcome = "PASS"
            else:
                outcome = "FAIL"
            label = f"{marker[len('criterion_'):]} {report.nodeid.split('::')[-1]}"
            _ACCEPTANCE[label] = outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: (int(s.split()[0]), s)):
        terminalreporter.write_line(f"{_ACCEPTANCE[label]:4}  criterion {label}")


def pytest_configure(config):
    for i in range(1, 9):
        config.addinivalue_line("markers", f"criterion_{i}: acceptance criterion {i}")
