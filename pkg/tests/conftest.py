import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from pseudolabel3d.geometry import Box3D, BoxClass

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def inside(xyz, box):
    """Independent membership oracle: translate, rotate by -yaw, range test."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s], [-s, c]])
    local = (xyz[:, :2] - [box.x, box.y]) @ rot.T
    return ((np.abs(local[:, 0]) <= box.l / 2) & (np.abs(local[:, 1]) <= box.w / 2)
            & (np.abs(xyz[:, 2] - box.z) <= box.h / 2))


def random_box(rng, spread=5.0, cls=BoxClass.UNKNOWN, score=None):
    return Box3D(*rng.uniform(-spread, spread, 2), rng.uniform(-1, 1),
                 *rng.uniform(0.5, 4.0, 3), rng.uniform(-math.pi, math.pi), cls,
                 float(rng.uniform()) if score is None else score)


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
dims = st.floats(0.2, 6.0, allow_nan=False)
boxes = st.builds(Box3D, finite, finite, st.floats(-2, 2), dims, dims, dims,
                  st.floats(-math.pi, math.pi, exclude_max=True),
                  st.sampled_from(list(BoxClass)), st.floats(0, 1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_drive():
    from pseudolabel3d.bench import SceneSpec, generate_drive
    spec = SceneSpec(objects=(("VEHICLE", 3), ("PEDESTRIAN", 2), ("CYCLIST", 1)), n_frames=3,
                     clutter=2, seed=7)
    return generate_drive(spec)


RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
