import numpy as np
import pytest

from indigo.rng import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def arr(rng, shape, dtype=np.float64):
    return rng.normal(shape, np.float64).astype(dtype)


def pytest_terminal_summary(terminalreporter):
    import sys
    acc = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")), None)
    results = getattr(acc, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
