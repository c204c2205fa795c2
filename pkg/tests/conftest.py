import numpy as np
import pytest

from ramanshape.plant import Plant, PlantConfig


@pytest.fixture(scope="session")
def cfg():
    return PlantConfig()


@pytest.fixture(scope="session")
def clean_plant():
    return Plant(noiseless=True)


@pytest.fixture(scope="session")
def noisy_plant():
    return Plant()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_acceptance(number, passed, text):
    line = f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}  {text}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
            terminalreporter.write_line(line)
