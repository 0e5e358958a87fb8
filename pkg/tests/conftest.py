import numpy as np
import pytest

from helpers import ACCEPTANCE, make_model


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])


@pytest.fixture
def tiny_model():
    return make_model(seed=3, std=0.5)


@pytest.fixture
def tokens_rng():
    return np.random.default_rng(1234)
