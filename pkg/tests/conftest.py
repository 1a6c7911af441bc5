import numpy as np
import pytest

# criterion -> (passed, detail), filled in by the acceptance tests
ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
