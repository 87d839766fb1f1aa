import numpy as np
import pytest
from hypothesis import settings

from svmpvar.model import ModelSpec
from svmpvar.simulate import demo_parameters, simulate_panel

settings.register_profile("package", deadline=None, max_examples=30)
settings.load_profile("package")

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_spec():
    return ModelSpec(variables=("temp", "gdp"), P=1, K=1).with_mcmc(
        iterations=30, burn_in=10, thin=2, particle_count=10, seed=3)


@pytest.fixture(scope="session")
def small_record(small_spec):
    truth = demo_parameters(small_spec, 4, 16, seed=1)
    return simulate_panel(truth, small_spec, 4, 16, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
