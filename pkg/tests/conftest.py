import numpy as np
import pytest

from mapfuse.geo_core import CameraIntrinsics, CameraPose, rotation_from_heading
from mapfuse.synthetic import SceneSpec, default_intrinsics, generate_scene


def random_rotation(rng):
    """Uniform random rotation via a QR decomposition with sign fix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def level_pose(x=0.0, y=0.0, z=2.5, heading=0.0, pitch=0.0):
    return CameraPose(rotation_from_heading(heading, pitch), np.array([x, y, z]))


def two_tone(h=160, w=160, split=80, axis=0, a=(40, 60, 90), b=(200, 180, 150)):
    """RGB image of color ``a`` before ``split`` and ``b`` from it on, along rows (axis 0) or columns."""
    img = np.empty((h, w, 3), np.uint8)
    img[:] = a
    if axis == 0:
        img[split:] = b
    else:
        img[:, split:] = b
    return img


@pytest.fixture
def intr() -> CameraIntrinsics:
    return default_intrinsics()


@pytest.fixture(scope="session")
def easy_scene():
    return generate_scene(SceneSpec(seed=3))


# one line per acceptance criterion, echoed after the run so the verdicts show
# up in the terminal even though passing tests have their output captured
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
