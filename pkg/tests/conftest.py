import numpy as np
import pytest

from ncmatch.geometry import rotation_about


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    return rotation_about(axis, rng.uniform(0, max_angle))


def two_view(rng, n, max_angle=0.5):
    """Random relative pose and ``n`` exact normalised correspondences."""
    R = random_rotation(rng, max_angle)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    X = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(4, 8, n)])
    x1 = X[:, :2] / X[:, 2:]
    Xb = X @ R.T + t
    x2 = Xb[:, :2] / Xb[:, 2:]
    return R, t, x1, x2


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
