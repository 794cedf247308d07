import numpy as np
import pytest

from hbox2rbox import _kernels

BACKENDS = ["numpy"] + (["numba"] if _kernels.HAS_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rbox_array(rng, n, center=50.0, spread=20.0, size=(2.0, 40.0)):
    cx, cy = rng.uniform(center - spread, center + spread, (2, n))
    w, h = rng.uniform(*size, (2, n))
    theta = rng.uniform(-np.pi / 2, np.pi / 2, n)
    return np.stack([cx, cy, w, h, theta], axis=1)


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
