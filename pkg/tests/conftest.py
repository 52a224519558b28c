import math

import pytest

from uncap.calibration import CalibratedDetection
from uncap.scenario import CavState, Detection


def cav(cid=1, pos=(0.0, 0.0), vel=(0.0, 0.0), heading=None, goal=(100.0, 0.0)):
    if heading is None:
        heading = math.atan2(vel[1], vel[0]) if math.hypot(*vel) > 0 else 0.0
    return CavState(cid, tuple(pos), tuple(vel), heading, tuple(goal), (tuple(pos), tuple(goal)))


def cdet(observer, obj, p, loc=(10.0, 0.0), speed=0.0, heading=0.0, conf=(0.9, 0.05, 0.03, 0.02)):
    """Calibrated detection with a chosen calibrated confidence."""
    det = Detection(observer, obj, tuple(loc), (4.5, 2.0, 1.5), speed, tuple(conf), heading)
    return CalibratedDetection(det, 0, 1.0 - sorted(conf)[-2], p, 1.0 - p)


@pytest.fixture
def make_cav():
    return cav


@pytest.fixture
def make_det():
    return cdet


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
