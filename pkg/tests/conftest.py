import numpy as np
import pytest

from newton_infer.model import Dataset

ACCEPTANCE_LINES = []


@pytest.fixture
def record():
    def _record(criterion, passed, detail):
        line = f"ACCEPTANCE {criterion:>2} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_linear(rng):
    x = rng.standard_normal((30, 4))
    y = x @ np.array([1.0, -2.0, 0.5, 0.0]) + 0.3 * rng.standard_normal(30)
    return Dataset(x, y)


@pytest.fixture
def small_logistic(rng):
    x = rng.standard_normal((40, 3))
    y = (rng.random(40) < 1 / (1 + np.exp(-x @ np.array([0.5, -0.5, 0.2])))).astype(float)
    return Dataset(x, y)
