import numpy as np
import pytest
from hypothesis import settings

from cifbm.coords import JointTable

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def example_table():
    """(p00, p01, p10, p11) = (0.4, 0.3, 0.2, 0.1) with x1 written first,
    stored in bitmask order (bit 0 is x1)."""
    return JointTable(2, np.array([0.4, 0.2, 0.3, 0.1]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
