import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wakesac.env import make_library  # noqa: E402


@pytest.fixture(scope="session")
def small_library():
    """Four short turbulence boxes, enough for unit-level environment tests."""
    return make_library(range(4), duration=1200.0)


_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(number: int, name: str, ok: bool, detail: str = ""):
        line = f"C{number:<2d} {'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        _VERDICTS.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s[1:3])):
            terminalreporter.write_line(line)
