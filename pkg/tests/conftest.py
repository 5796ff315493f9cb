import numpy as np
import pytest

from pcanomaly.data import synth_generate
from pcanomaly.training import DESK_TRAINING, fit

SPHERE_CONFIG = DESK_TRAINING.replace(epochs=200, seed=0)


@pytest.fixture(scope="session")
def sphere_run():
    """A desk-scale model trained on 64 synthetic spheres (about a minute)."""
    spheres = synth_generate(["sphere"], per_class=64, n=256, seed=0)
    return spheres, fit(spheres, SPHERE_CONFIG)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(module.RESULTS):
            terminalreporter.write_line(module.RESULTS[number])
