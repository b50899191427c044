import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("pbfm", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("pbfm")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
