import numpy as np
import pytest

from lljump.model import LegLump, RobotModel, State, quat_normalize


def make_quad(leg_mass=2.0, rho=0.5):
    hips = [(0.3, 0.18, 0.0), (0.3, -0.18, 0.0), (-0.3, 0.18, 0.0), (-0.3, -0.18, 0.0)]
    return RobotModel(
        body_mass=35.0 - 4 * leg_mass,
        body_inertia=np.diag([0.3, 0.9, 1.0]),
        legs=[LegLump(leg_mass, h, rho) for h in hips],
        l_min=0.31,
        l_max=0.6,
        mu=0.7,
        f_max_z=400.0,
        name="quad",
    )


def make_biped(leg_mass=1.5, rho=0.4):
    corners = [(0.06, 0.03, 0.0), (0.06, -0.03, 0.0), (-0.04, 0.03, 0.0), (-0.04, -0.03, 0.0)]
    return RobotModel(
        body_mass=16.0 - 2 * leg_mass,
        body_inertia=np.diag([0.35, 0.3, 0.12]),
        legs=[LegLump(leg_mass, (0.0, 0.12, 0.0), rho), LegLump(leg_mass, (0.0, -0.12, 0.0), rho)],
        foot_type="planar",
        corner_offsets=corners,
        l_min=0.35,
        l_max=0.75,
        mu=0.7,
        f_max_z=200.0,
        name="biped",
    )


@pytest.fixture
def quad():
    return make_quad()


@pytest.fixture
def biped():
    return make_biped()


def random_unit_quat(rng):
    return quat_normalize(rng.normal(size=4))


def random_state(rng, scale=1.0):
    return State(
        rng.normal(size=3) * 0.2 + [0, 0, 0.5],
        random_unit_quat(rng),
        rng.normal(size=3) * 20 * scale,
        rng.normal(size=3) * 2 * scale,
    )


CRITERIA_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
