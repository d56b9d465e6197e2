import sys
from pathlib import Path

import numpy as np
import pytest

# tests import shared oracles as a plain module
sys.path.insert(0, str(Path(__file__).parent))

from ctxdiff.rng import SeededRng

# one line per acceptance check, replayed after the test summary so the
# verdicts are visible regardless of output capture settings
ACCEPTANCE_VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.write_sep("-", "acceptance verdicts")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def f64_rng():
    gen = SeededRng(99)

    def make(shape, scale=1.0):
        return gen.normal(shape, dtype=np.float64) * scale

    return make
