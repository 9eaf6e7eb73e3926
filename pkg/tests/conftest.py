import sys

import numpy as np
import pytest

from contactpolicy.clustering import ClusteringConfig, ParticleClusterer
from contactpolicy.environment import Box, Region, RobotModel, box_surface_points, build_environment
from contactpolicy.simulator import ControllerGains, KinematicSimulator
from contactpolicy.spaces import SE2, SpaceMetric


def square_robot(half=0.1, spacing=0.05):
    pts = box_surface_points([-half, -half], [half, half], spacing)
    return RobotModel(pts, [[0.0, 0.0]])


def cube_robot(half=0.1, spacing=0.1):
    pts = box_surface_points([-half] * 3, [half] * 3, spacing)
    return RobotModel(pts, [[0.0, 0.0, 0.0]])


def make_sim(env, robot, space=SE2, rotation_weight=0.5, **kw):
    gains = kw.pop("gains", ControllerGains(t_simulate=20.0, t_exec=20.0))
    return KinematicSimulator(env, robot, space, SpaceMetric(rotation_weight), gains, **kw)


@pytest.fixture
def open_world():
    """4 x 4 m free plane."""
    return build_environment([0, 0], [4, 4], 0.05)


@pytest.fixture
def wall_world():
    """4 x 4 m plane with a full-height wall at x in [2.0, 2.2]."""
    return build_environment([0, 0], [4, 4], 0.05, [Box((2.0, 0.0), (2.2, 4.0), "wall")],
                             [Region("west", Box((0.0, 0.0), (2.0, 4.0))),
                              Region("east", Box((2.2, 0.0), (4.0, 4.0)))])


@pytest.fixture
def open_sim(open_world):
    return make_sim(open_world, square_robot())


@pytest.fixture
def wall_sim(wall_world):
    return make_sim(wall_world, square_robot())


@pytest.fixture
def wall_clusterer(wall_sim):
    return ParticleClusterer(wall_sim, ClusteringConfig("WCR", 0.75, 0.2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
