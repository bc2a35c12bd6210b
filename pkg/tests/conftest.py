import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowedit_lab.config import figure3_mixtures
from flowedit_lab.field import ConditionedModel

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def fig3():
    return figure3_mixtures()


@pytest.fixture(scope="session")
def fig3_model(fig3):
    src, tar = fig3
    return ConditionedModel({"src": src, "tar": tar})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for result in sorted(RESULTS, key=lambda r: r.number):
            terminalreporter.write_line(result.line())
