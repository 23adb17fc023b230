import numpy as np
import pytest

from augpdgd.problem import QuadraticForm, chain_problem, make_cost, paper10, solve_kkt


@pytest.fixture(scope="session")
def p10():
    return paper10()


@pytest.fixture(scope="session")
def kkt10(p10):
    return solve_kkt(p10)


def two_agent():
    """f1 = 0.9(x+1)^2, f2 = (x-4)^2, x1 - x2 = 0."""
    c1 = make_cost(QuadraticForm([[1.8]], [1.8], 0.9))
    c2 = make_cost(QuadraticForm([[2.0]], [-8.0], 16.0))
    return chain_problem([c1, c2], name="two")


def quad_chain(h_diag, g=None):
    g = np.zeros(len(h_diag)) if g is None else g
    return chain_problem([make_cost(QuadraticForm([[h]], [gi])) for h, gi in zip(h_diag, g)], name="qchain")


@pytest.fixture
def two():
    return two_agent()


ACCEPTANCE_LINES = {}


def report(k, ok, detail):
    line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
