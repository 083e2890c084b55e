import numpy as np
import pytest

from volufuse import neural

neural.set_threads(1)

# acceptance verdicts, echoed in the terminal summary even without -s
VERDICTS = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
