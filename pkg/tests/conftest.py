import numpy as np
import pytest

from voxfcn.io_kitti import Calibration
from voxfcn.synth import synthetic_calibration


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def calib() -> Calibration:
    return synthetic_calibration()


@pytest.fixture
def identity_calib() -> Calibration:
    """Sensor frame == camera frame, unit focal length, principal point at 0."""
    proj = np.hstack([np.eye(3), np.zeros((3, 1))])
    return Calibration(np.eye(4), proj, (100, 100))


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
