import numpy as np
import pytest
import yaml

from lljump.errors import ScenarioError
from lljump.model import quat_to_rot, yaw_of
from lljump.scenario import BUNDLED_DIR, bundled_scenarios, load_scenario


def test_bundled_scenarios_load():
    names = bundled_scenarios()
    for required in ("quad_twist90", "quad_fwd30", "biped_box35", "quad_board_drop"):
        assert required in names
    for name in names:
        scn = load_scenario(name)
        model = scn.robot_model()
        if scn.task is not None:
            task = scn.jump_task(model)
            task.validate(model)
            assert task.p_ini.shape == (model.n_legs, 3)


def test_twins_share_mass_and_nominal_inertia():
    ll, srb = load_scenario("quad_twist90").twin_models()
    assert srb.is_srbm() and not ll.is_srbm()
    assert srb.total_mass == ll.total_mass
    assert load_scenario("quad_twist90_srbm").robot_model().is_srbm()


def test_goal_feet_follow_goal_heading():
    scn = load_scenario("quad_twist90")
    task = scn.jump_task()
    assert np.isclose(yaw_of(task.x_fin.q), np.pi / 2)
    rel = (task.p_fin - task.x_fin.r) @ quat_to_rot(task.x_fin.q)
    assert np.allclose(rel[:, :2], np.array([lg.attach_offset for lg in scn.robot.legs])[:, :2], atol=1e-12)
    assert np.allclose(task.p_fin[:, 2], 0.0)


def test_box_goal_feet_on_the_box():
    task = load_scenario("biped_box35").jump_task()
    assert np.allclose(task.p_fin[:, 2], 0.35)
    assert np.isclose(task.x_fin.r[2] - task.x_ini.r[2], 0.35)


def write(tmp_path, data):
    p = tmp_path / "s.yaml"
    p.write_text(yaml.safe_dump(data))
    return p


def base():
    return yaml.safe_load((BUNDLED_DIR / "quad_twist90.yaml").read_text())


@pytest.mark.parametrize("mutate, match", [
    (lambda d: d.update(colour="red"), "colour"),
    (lambda d: d["robot"].update(leg_count=4), "leg_count"),
    (lambda d: d.update(schema_version=99), "schema_version"),
    (lambda d: d.update(solver={"max_outer": 5}), "max_outer"),
    (lambda d: d.update(weights={"w_spin": 1.0}), "w_spin"),
    (lambda d: d["robot"].update(l_min=0.7), "l_min"),
    (lambda d: d.pop("task"), "task"),
])
def test_bad_scenarios_rejected(tmp_path, mutate, match):
    d = base()
    mutate(d)
    with pytest.raises(ScenarioError, match=match):
        load_scenario(write(tmp_path, d))


def test_unreadable_files(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "nope.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("robot: [unclosed")
    with pytest.raises(ScenarioError):
        load_scenario(p)


def test_overrides_and_platform():
    scn = load_scenario("quad_board_drop")
    assert scn.detector_config().threshold == -10.0
    assert scn.sim_config(seed=5).seed == 5 and scn.sim_config().noise_v == 0.05
    g = scn.ground_model(platform=0.02)
    assert g.height_at(np.array([0.0]), np.array([0.0]))[0] == pytest.approx(0.02)
