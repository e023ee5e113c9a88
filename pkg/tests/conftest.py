import numpy as np
import pytest

from snsot import DualPotentials, Problem


def random_problem(n, eta, seed, uniform=False):
    rng = np.random.default_rng(seed)
    C = rng.random((n, n))
    if uniform:
        r = c = np.full(n, 1.0 / n)
    else:
        r = rng.random(n) + 0.2
        c = rng.random(n) + 0.2
        r, c = r / r.sum(), c / c.sum()
    return Problem(C, r, c, eta)


def random_duals(n, seed, scale=0.3):
    rng = np.random.default_rng(seed + 1000)
    return DualPotentials(scale * rng.standard_normal(n), scale * rng.standard_normal(n))


@pytest.fixture
def one_by_one():
    return Problem(np.zeros((1, 1)), np.ones(1), np.ones(1), 1.0)


@pytest.fixture
def sym2():
    return lambda eta: Problem(np.array([[0.0, 1.0], [1.0, 0.0]]), np.full(2, 0.5), np.full(2, 0.5), eta)


# acceptance verdicts, printed as one block at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
