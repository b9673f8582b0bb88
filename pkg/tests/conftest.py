import numpy as np
import pytest

from rpavg.problems import LeastSquaresProblem, LogisticProblem, QuantileProblem, NormalLaw

ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE.setdefault(criterion, []).append((bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
        for ok, detail in ACCEPTANCE[key]:
            terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def quantile():
    return QuantileProblem(NormalLaw(), 0.5)


@pytest.fixture(scope="session")
def least_squares():
    H = np.array([[2.0, 0.5], [0.5, 1.0]])
    S0 = np.array([[1.0, 0.2], [0.2, 0.5]])
    return LeastSquaresProblem(H, np.array([1.0, -2.0]), S0)


@pytest.fixture(scope="session")
def logistic_small():
    # small quadrature design keeps oracle calls cheap; identities hold for any size
    return LogisticProblem((1.0, -1.0), 2.0, quadrature_draws=20000)


@pytest.fixture(scope="session")
def logistic_full():
    return LogisticProblem((1.0, -1.0), 2.0)
