import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def loop_convolve(a, b):
    out = [0.0] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i + j] += x * y
    return np.array(out)


def loop_correlate(p, s):
    return np.array([sum(p[i + j] * s[j] for j in range(len(s)))
                     for i in range(len(p) - len(s) + 1)])


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
