import numpy as np
import pytest

from conftest import make_biped, make_quad
from lljump.controller import (
    ControllerMode, ControllerWeights, Mode, TaskGains, angular_command, clip_to_pyramid, force_qp, linear_command,
    solve_force_qp, update_mode,
)
from lljump.errors import NoActiveContacts
from lljump.model import State, contact_points, quat_from_axis_angle, quat_from_yaw, quat_identity, quat_to_rot
from lljump.solver.qp import QpProblem, solve_qp
from lljump.transcription import friction_pyramid_matrix


def stance(model, height=0.45):
    s = State([0, 0, height], quat_identity(), np.zeros(3), np.zeros(3))
    feet = np.array([lg.attach_offset for lg in model.legs]) + [0, 0, -height]
    return s, feet


def assert_feasible(f, model, tol=1e-8):
    P = friction_pyramid_matrix(model.mu)
    assert np.all(f @ P.T <= tol)
    assert np.all(f[:, 2] >= -tol) and np.all(f[:, 2] <= model.f_max_z + tol)


def test_linear_command_examples():
    g = TaskGains(K_P_pos=100.0, K_D_pos=0.0)
    z = np.zeros(3)
    acc = np.array([0.3, -1.0, 2.0])
    assert np.allclose(linear_command(z, z, acc, z, z, TaskGains()), acc)
    assert np.allclose(linear_command([0.1, 0, 0], z, z, z, z, g), [10.0, 0, 0])
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3))
    gg = TaskGains(K_P_pos=[1.0, 2.0, 3.0], K_D_pos=[4.0, 5.0, 6.0])
    total = linear_command(a + b, a, b, z, z, gg)
    assert np.allclose(total, linear_command(a, z, z, z, z, gg) + linear_command(b, a, b, z, z, gg))


def test_angular_command_examples():
    z = np.zeros(3)
    I = np.eye(3)
    wd = np.array([0.1, 0.2, 0.3])
    assert np.allclose(angular_command(I, I, wd, wd, wd, TaskGains()), wd)
    g = TaskGains(K_P_ang=10.0, K_D_ang=0.0)
    R90 = quat_to_rot(quat_from_yaw(np.pi / 2))
    assert np.allclose(angular_command(R90, I, z, z, z, g), [0, 0, 10 * np.pi / 2])
    rng = np.random.default_rng(1)
    for _ in range(20):
        A = quat_to_rot(quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, 3)))
        B = quat_to_rot(quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, 3)))
        ab = angular_command(A, B, z, z, z, g)
        ba = angular_command(B, A, z, z, z, g)
        # A B' and B A' are inverse rotations
        assert np.allclose(ab, -ba, atol=1e-9)


def test_angular_command_continuous_at_zero_angle():
    g = TaskGains(K_P_ang=1.0, K_D_ang=0.0)
    z = np.zeros(3)
    for eps in (1e-3, 1e-6, 1e-9, 1e-12):
        R = quat_to_rot(quat_from_axis_angle([0.0, 1.0, 0.0], eps))
        out = angular_command(R, np.eye(3), z, z, z, g)
        assert np.allclose(out, [0.0, eps, 0.0], atol=1e-12 + 1e-6 * eps)


def test_gain_validation():
    with pytest.raises(ValueError):
        TaskGains(K_P_pos=-1.0)
    with pytest.raises(ValueError):
        ControllerWeights(w_reg=0.0)
    with pytest.raises(ValueError):
        ControllerWeights(W_lin=-np.eye(3))


def test_static_stance_force_balance():
    model = make_quad()
    s, feet = stance(model)
    pts = contact_points(s.q, feet, model)
    f, rep = solve_force_qp(s, np.zeros(3), np.zeros(3), pts, None, ControllerWeights(), model)
    mg = model.total_mass * 9.81
    assert np.abs(f[:, 2] - mg / 4).max() <= 1e-6
    assert np.abs(f[:, :2]).max() <= 1e-6
    assert_feasible(f, model)


def test_momentum_residual_when_unconstrained():
    model = make_quad()
    s, feet = stance(model)
    pts = contact_points(s.q, feet, model)
    acc = np.array([0.5, -0.3, 1.0])
    Ld = np.array([1.0, -2.0, 3.0])
    f, _ = solve_force_qp(s, acc, Ld, pts, None, ControllerWeights(), model)
    m = model.total_mass
    lin = f.sum(axis=0) + m * model.gravity - m * acc
    ang = np.cross(pts - s.r, f).sum(axis=0) - Ld
    assert np.linalg.norm(lin) <= 1e-6 * (1 + np.linalg.norm(m * acc))
    assert np.linalg.norm(ang) <= 1e-6 * (1 + np.linalg.norm(Ld))


def test_saturates_on_large_upward_command():
    model = make_quad()
    s, feet = stance(model)
    pts = contact_points(s.q, feet, model)
    acc = np.array([0.0, 0.0, 2 * 4 * model.f_max_z / model.total_mass])
    f, _ = solve_force_qp(s, acc, np.zeros(3), pts, None, ControllerWeights(), model)
    assert np.allclose(f[:, 2], model.f_max_z, atol=1e-8)
    assert_feasible(f, model)


def test_force_tracking_projects_desired_forces():
    model = make_quad()
    s, feet = stance(model)
    pts = contact_points(s.q, feet, model)
    rng = np.random.default_rng(3)
    f_des = rng.normal(size=(4, 3)) * [80, 80, 150] + [0, 0, 60]
    w = ControllerWeights().landing(1.0)
    f, _ = solve_force_qp(s, np.zeros(3), np.zeros(3), pts, f_des, w, model)
    # oracle: euclidean projection of each contact force onto pyramid and box
    P = friction_pyramid_matrix(model.mu)
    for i in range(4):
        proj = QpProblem(np.eye(3), -f_des[i], A_in=P, b_in=np.zeros(4), lb=[-np.inf, -np.inf, 0], ub=[np.inf, np.inf, model.f_max_z])
        zi, _ = solve_qp(proj)
        assert np.allclose(f[i], zi, atol=1e-6)
    assert_feasible(f, model)


def test_biped_corner_contacts_feasible():
    model = make_biped()
    s, feet = stance(model, 0.6)
    pts = contact_points(s.q, feet, model)
    assert pts.shape == (8, 3)
    f, _ = solve_force_qp(s, np.array([0.2, 0, 0.5]), np.array([0, 0.5, 0.2]), pts, None, ControllerWeights(), model)
    assert_feasible(f, model)
    assert np.isclose(f[:, 2].sum(), model.total_mass * (9.81 + 0.5), rtol=1e-6)


def test_warm_start_reuses_active_set():
    model = make_quad()
    s, feet = stance(model)
    pts = contact_points(s.q, feet, model)
    f1, r1 = solve_force_qp(s, np.zeros(3), np.zeros(3), pts, None, ControllerWeights(), model)
    f2, r2 = solve_force_qp(s, np.zeros(3), np.zeros(3), pts, None, ControllerWeights(), model, f1.ravel(), r1.multipliers)
    assert r2.iterations == 0
    assert np.allclose(f1, f2, atol=1e-9)


def test_no_contacts_raises():
    model = make_quad()
    s, _ = stance(model)
    with pytest.raises(NoActiveContacts):
        force_qp(s, np.zeros(3), np.zeros(3), np.zeros((0, 3)), None, ControllerWeights(), model)


def test_clip_to_pyramid_is_feasible():
    model = make_quad()
    f = clip_to_pyramid(np.random.default_rng(4).normal(size=(4, 3)) * 500, model.mu, model.f_max_z)
    assert_feasible(f, model, tol=1e-12)


def test_mode_machine():
    m = ControllerMode()
    m1 = update_mode(m, True, 1.0)
    assert m1.mode == Mode.FORCE_TRACKING and m1.timer(1.0) == 0.0
    m2 = update_mode(m1, True, 1.1)
    assert m2.entered_at == 1.0  # not reset
    assert update_mode(m1, False, 1.15).mode == Mode.FORCE_TRACKING
    m3 = update_mode(m1, False, 1.2)
    assert m3.mode == Mode.TRAJECTORY_TRACKING
    assert update_mode(m, False, 5.0) is m


def test_force_phase_duration_within_one_period():
    for rate in (400.0, 1000.0, 333.0):
        mode = ControllerMode()
        dt = 1.0 / rate
        t_in = t_out = None
        for k in range(2000):
            t = 0.01234 + k * dt
            prev = mode.mode
            mode = update_mode(mode, k == 7, t)
            if prev != mode.mode and mode.mode == Mode.FORCE_TRACKING:
                t_in = t
            if prev != mode.mode and mode.mode == Mode.TRAJECTORY_TRACKING:
                t_out = t
                break
        assert abs((t_out - t_in) - 0.2) <= dt
