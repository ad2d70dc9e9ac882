import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def leaf(rng, shape, low=-1.0, high=1.0):
    from hspgnn import diffcore as dc

    return dc.Tensor(rng.uniform(low, high, shape), requires_grad=True)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
