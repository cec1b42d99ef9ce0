import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from deformableformer.data import SyntheticParams, generate_synthetic

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    """The 200-image 64x64 benchmark set (seed 7)."""
    out = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(SyntheticParams(seed=7, n_per_class=100), out)
    return out


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance
    if test_acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.LINES:
            terminalreporter.write_line(line)
