import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wsgan.pipeline import single_worker  # noqa: E402

_CRITERIA: dict[str, tuple[bool, str]] = {}


def pytest_configure(config):
    single_worker()


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion; printed in the summary."""

    def record(name: str, ok: bool, detail: str) -> bool:
        _CRITERIA[name] = (bool(ok), detail)
        print(f"{name}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s[2:]) if s[2:].isdigit() else 99):
        ok, detail = _CRITERIA[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
