import numpy as np
import pytest
import scipy.sparse as sp


def random_spd(n, density=None, seed=0):
    rng = np.random.default_rng(seed)
    density = min(1.0, 4.0 / n) if density is None else density
    M = sp.random(n, n, density=density, random_state=rng)
    return (M.T @ M + n * sp.eye(n)).tocsc()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# verdict lines collected by the acceptance suite
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
