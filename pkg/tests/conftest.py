import numpy as np
import pytest
import torch

from artifact.imagecore import ProtectionTarget, synthetic_images


@pytest.fixture(autouse=True)
def _single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_images():
    return synthetic_images(4, 64, seed=3)


@pytest.fixture(scope="session")
def toy_target():
    return ProtectionTarget.builtin(64)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
