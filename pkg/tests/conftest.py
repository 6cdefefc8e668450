import numpy as np
import pytest

from paraopt.model import ControlProblem, FinalValue, LinearModel, heat_problem, burgers_problem


class CubicDecay(ControlProblem):
    """``g(y) = -y**3`` componentwise."""

    def g(self, y):
        return -np.asarray(y) ** 3

    def _scale(self, d, z):
        return d[:, None] * z if np.ndim(z) == 2 else d * z

    def g_jvp(self, y, z):
        return self._scale(-3.0 * np.asarray(y) ** 2, z)

    g_vjp = g_jvp

    def adjoint_hess(self, y, lam, z):
        return self._scale(-6.0 * np.asarray(y) * np.asarray(lam), z)


def scalar_model(k=-1.0, gamma=1.0, T=1.0, y0=1.0, target=0.0):
    return LinearModel([[k]], gamma, T, [y0], FinalValue(np.array([target])))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def heat8():
    return heat_problem(8)


@pytest.fixture(scope="session")
def burgers8():
    return burgers_problem(8)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
