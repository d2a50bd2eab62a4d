import numpy as np
import pytest

from flowrecon.engine import ParameterStore, precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body with float64 as the default dtype."""
    with precision(np.float64):
        yield


@pytest.fixture
def store64():
    return ParameterStore(seed=7, dtype=np.float64)


def randomize(store, rng, scale=0.1, prefix=""):
    """Replace every parameter (including zero-initialized output layers) by noise."""
    for name in store.names(prefix):
        store.set(name, store.values[name] + scale * rng.standard_normal(store.values[name].shape))


ACCEPTANCE = []


def report(capsys, k, ok, details):
    """Print and remember one acceptance line."""
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {details}"
    ACCEPTANCE.append((k, line))
    with capsys.disabled():
        print("\n" + line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
