import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import _report

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    if _report.LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_report.LINES):
            terminalreporter.write_line(_report.LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
