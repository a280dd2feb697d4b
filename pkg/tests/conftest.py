import numpy as np
import pytest

from ddcsense.estimate import nfxp_estimate
from ddcsense.zurcher import ZurcherConfig, simulate_panel


@pytest.fixture(scope="session")
def desk_config():
    return ZurcherConfig()


@pytest.fixture(scope="session")
def desk_data(desk_config):
    return simulate_panel(desk_config, 100, 200, seed=0)


@pytest.fixture(scope="session")
def desk_fit(desk_config, desk_data):
    return nfxp_estimate(desk_config.model(), desk_data)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES):
            terminalreporter.write_line(line)
