import numpy as np
import pytest
import torch

from oodattack.zoo.data import ToyWorldSpec
from oodattack.zoo.toy import toy_preset

# filled by tests/test_acceptance.py, printed once at the end of the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance checks")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def world():
    return ToyWorldSpec()


@pytest.fixture(scope="session")
def small_world():
    return ToyWorldSpec(samples_per_class=3)


@pytest.fixture(scope="session")
def toy_a(world):
    return toy_preset("toy-a", world)


@pytest.fixture(scope="session")
def toy_pool(world):
    return [toy_preset(n, world) for n in ("toy-a", "toy-b", "toy-c")]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand_images(rng, n, size=32, lo=0.0, hi=1.0):
    return torch.from_numpy(rng.uniform(lo, hi, size=(n, 3, size, size)))
