import numpy as np
import pytest
from hypothesis import settings

from refsketch import fixtures
from refsketch.backends import load_backends
from refsketch.pipeline import PRESETS

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def backends():
    return load_backends("toy")


@pytest.fixture(scope="session")
def diffusion(backends):
    return backends.diffusion


@pytest.fixture(scope="session")
def fast_config():
    """50-step preset: same structure as the default, half the work."""
    return PRESETS["text"]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def dog():
    return fixtures.fixture("dog")


@pytest.fixture(scope="session")
def hatch():
    return fixtures.fixture("hatch")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
