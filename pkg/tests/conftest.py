import numpy as np
import pytest

from meshpose.features import VertexBank
from meshpose.geometry import CameraIntrinsics, build_prototype_set, default_intrinsics

# Lines recorded by the acceptance module, echoed once at the end of the run.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def prototypes():
    return build_prototype_set()


@pytest.fixture(scope="session")
def bank(prototypes):
    return VertexBank(prototypes)


@pytest.fixture
def K():
    return default_intrinsics()


@pytest.fixture
def K500():
    return CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
