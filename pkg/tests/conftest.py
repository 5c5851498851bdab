"""Shared fixtures and the acceptance-line reporter."""

import numpy as np
import pytest

from latseg import dirrank, opfit

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance checks")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_spec():
    return dirrank.SuiteSpec(side=16, count=12, noise_sigma=0.01)


@pytest.fixture(scope="session")
def small_source(small_spec):
    return dirrank.synthetic_affine_source(small_spec, 5)


@pytest.fixture(scope="session")
def small_fit(small_source):
    return opfit.fit_operators(small_source, opfit.FitConfig(seed=0))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
