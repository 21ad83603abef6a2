import numpy as np
import pytest

from cate_bounds.domain import from_log_lambda, make_sensitivity


@pytest.fixture
def s_e():
    """Sensitivity level with log-lambda equal to one."""
    return from_log_lambda(1.0)


@pytest.fixture
def s_one():
    return make_sensitivity(1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
