import numpy as np
import pytest

from contdid.panel import Panel


def make_panel(d, y, w=None):
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    return Panel(np.arange(d.shape[0]), np.arange(1, d.shape[1] + 1), d, y, w)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def linear_panel():
    """Two periods, half stayers, homogeneous slope 1.5, trends depending on D1."""
    rng = np.random.default_rng(7)
    n = 1500
    d1 = rng.uniform(0, 2, n)
    move = rng.random(n) < 0.5
    dd = np.where(move, rng.choice([-1, 1], n) * rng.uniform(0.5, 1.5, n), 0.0)
    d = np.column_stack([d1, d1 + dd])
    alpha = rng.normal(size=n)
    y = alpha[:, None] + np.array([0.0, 0.3]) + 1.5 * d + np.column_stack([0 * d1, 0.5 * d1])
    y = y + rng.normal(scale=0.5, size=(n, 2))
    return make_panel(d, y)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
