from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mvreg import imaging, se3
from mvreg.projector import DetectorGeometry, pa_pose, render

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# Acceptance verdicts collected by tests/test_acceptance.py and echoed at the end of the run.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def small_phantom():
    return imaging.make_phantom("sphere_pair", (32, 32, 32), (4.0, 4.0, 4.0), 0)


@pytest.fixture(scope="session")
def small_geom():
    return DetectorGeometry(1000.0, 64, 64, 4.0)


@pytest.fixture(scope="session")
def base_pose():
    return pa_pose(600.0)


@pytest.fixture(scope="session")
def self_rendered(small_phantom, small_geom, base_pose):
    """Two true poses near PA and their renders."""
    vol, _ = small_phantom
    dist = se3.TwistDistribution.isotropic(4.0, 0.04)
    t1 = se3.compose(se3.exp(se3.sample_twist(dist, 11)), base_pose)
    t2 = se3.compose(se3.exp(se3.sample_twist(dist, 12)), base_pose)
    return [t1, t2], [render(vol, small_geom, t1), render(vol, small_geom, t2)]


def random_pose(rng: np.random.Generator, max_angle: float = 3.0, max_t: float = 100.0) -> se3.Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phi = axis * rng.uniform(0.0, max_angle)
    return se3.exp(np.concatenate([rng.uniform(-max_t, max_t, 3), phi]))
