from __future__ import annotations

import numpy as np
import pytest

from bpel.likelihood import PosteriorSpec
from bpel.model import IvSimConfig, iv_moment_model, simulate_iv
from bpel.penalty import PenaltySpec

# verdict lines collected by the acceptance suite, echoed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict():
    """Record (and print) one PASS/FAIL line for an acceptance criterion."""

    def record(number, passed, detail):
        line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def desk_data():
    """Small linear-link IV sample shared by the slower tests."""
    return simulate_iv(IvSimConfig(n=120, r=20, seed=3))


@pytest.fixture(scope="session")
def desk_post(desk_data):
    return PosteriorSpec(
        iv_moment_model(20, "linear"), desk_data, PenaltySpec.l1(0.03),
        IvSimConfig().space,
    )
