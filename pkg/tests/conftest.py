import numpy as np
import pytest

from sdacare.care_core import CareProblem


@pytest.fixture
def scalar_problem():
    """a = -1, b = c = 1, gamma = 1; the stabilizing solution is sqrt(2) - 1."""
    return CareProblem([[-1.0]], [[1.0]], [[1.0]], gamma=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one acceptance line: ``report(number, ok, detail)``."""
    def _report(number, ok, detail, status=None):
        ACCEPTANCE[number] = (status or ("PASS" if ok else "FAIL"), detail)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {status}  {detail}")
