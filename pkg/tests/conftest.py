import numpy as np
import pytest

from pointloc.geometry import CameraModel, Pose, random_rotation


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def camera():
    K = np.array([[500.0, 0.0, 320.0], [0.0, 480.0, 240.0], [0.0, 0.0, 1.0]])
    return CameraModel(K, 640, 480)


def random_scene_pose(rng, depth=(4.0, 12.0)):
    """Pose placing the origin at a random depth in front of the camera."""
    R = random_rotation(rng)
    t = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(*depth)])
    return Pose(R, t)


def points_in_view(pose, camera, n, rng, depth=(1.0, 30.0)):
    """World points whose projections fall inside the image at the given depth range."""
    u = rng.uniform(0, camera.width, n)
    v = rng.uniform(0, camera.height, n)
    z = rng.uniform(*depth, n)
    Xc = camera.backproject(np.column_stack([u, v]), z)
    return pose.inverse().transform(Xc)


ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store and print one acceptance verdict line."""
    line = f"{criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
