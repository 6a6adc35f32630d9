import json
from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def derived():
    """Reference values frozen by ``fixtures/build_oracles.py``."""
    return json.loads((FIXTURES / "derived.json").read_text(encoding="utf-8"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_LINES = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record a one-line acceptance verdict, echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def _report(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        lines.append(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
