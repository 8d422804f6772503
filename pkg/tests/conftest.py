import numpy as np
import pytest

from fatigue_sr.baselines import load_material
from fatigue_sr.dataio import design_matrix, load_dataset, preprocess_dr

# ln N = C1 + C2 / ((eps_a + gamma_a) - C3 / (tau/G * (eps_a - C4) + C5))
GH4169_STRUCTURE = "add C div C sub add eps_a gamma_a div C add mul tau_over_G sub eps_a C C"
GH4169_25C_PRINTED = [3.148, 7.171, 0.003, 0.785, 2.74]
GH4169_650C_PRINTED = [0.302, 11.625, -1202.181, -297.975, 185.977]


@pytest.fixture(scope="session")
def gh25():
    return load_material("GH4169_25C")


@pytest.fixture(scope="session")
def data1():
    return load_dataset("data1")


@pytest.fixture(scope="session")
def data1_xy(data1, gh25):
    return design_matrix(preprocess_dr(data1, gh25))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
