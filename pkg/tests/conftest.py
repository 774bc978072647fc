import numpy as np
import pytest

from fedleak.sample import mnist_sample


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("mnist")


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    """1000-digit MNIST subset read back through the IDX loader."""
    return mnist_sample(mnist_dir, limit=1000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from verdicts import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
