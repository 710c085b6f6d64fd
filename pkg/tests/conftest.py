import numpy as np
import pytest

from tknets.domains import write_idx


@pytest.fixture(scope="session")
def mnist_idx(tmp_path_factory):
    """IDX pair built from the 5000-image MNIST subset bundled with mlxtend."""
    mlx = pytest.importorskip("mlxtend.data")
    x, y = mlx.mnist_data()
    d = tmp_path_factory.mktemp("mnist")
    images, labels = d / "images-idx3-ubyte", d / "labels-idx1-ubyte"
    write_idx(images, labels, x.reshape(-1, 28, 28).astype(np.uint8), y)
    return images, labels


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
