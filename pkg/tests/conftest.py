import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = []


class Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.details = []
        self.verdict = "PASS"

    def note(self, text):
        self.details.append(text)


def _emit(c, verdict, seconds):
    extra = "; ".join(c.details)
    line = f"CRITERION {c.number} {verdict}: {c.title} [{seconds:.1f}s]" + (f" {extra}" if extra else "")
    _ACCEPTANCE.append(line)
    print(line)


@contextmanager
def _criterion(number, title):
    c = Criterion(number, title)
    t0 = time.perf_counter()
    try:
        yield c
    except pytest.skip.Exception:
        _emit(c, "SKIP", time.perf_counter() - t0)
        raise
    except BaseException:
        _emit(c, "FAIL", time.perf_counter() - t0)
        raise
    _emit(c, c.verdict, time.perf_counter() - t0)


@pytest.fixture
def criterion():
    """Context manager recording one acceptance criterion as PASS/FAIL/SKIP."""
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
