import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE = {}


@pytest.fixture
def record():
    """Store one verdict line per acceptance criterion."""

    def _record(number, ok, detail):
        ACCEPTANCE.setdefault(number, []).append((bool(ok), detail))
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        entries = ACCEPTANCE[number]
        ok = all(e[0] for e in entries)
        detail = "; ".join(e[1] for e in entries)
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
