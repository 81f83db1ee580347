import numpy as np
import pytest

ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store one acceptance verdict and print it immediately."""
    line = f"ACCEPTANCE criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
