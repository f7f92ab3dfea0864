import numpy as np
import pytest

from conftest import make_biped, make_quad
from lljump.errors import InconsistentSchedule, InfeasibleBounds, LengthMismatch, MissingJacobian
from lljump.model import State, quat_from_yaw, quat_identity, quat_to_rot
from lljump.solver.derivatives import jacobian
from lljump.solver.nlp import NlpSolverConfig, solve_nlp
from lljump.transcription import (
    CostWeights, JumpTask, Phase, PhaseSchedule, Trajectory, build_nlp, cost_energy, cost_final_orientation,
    cost_smoothness, cost_time, expected_counts, extract_trajectory, friction_pyramid_matrix,
    grf_limit_from_torques, pack_trajectory, resimulate, total_cost,
)


def stance_feet(model, r, q, height):
    hips = np.array([lg.attach_offset for lg in model.legs])
    p = (quat_to_rot(q) @ (hips + [0, 0, -height]).T).T + r
    p[:, 2] = 0.0
    return p


def twist_task(model, yaw=np.pi / 2, N=6, height=0.45, dx=0.0):
    r0, r1 = np.array([0, 0, height]), np.array([dx, 0, height])
    q0, q1 = quat_identity(), quat_from_yaw(yaw)
    zero = np.zeros(3)
    return JumpTask(State(r0, q0, zero, zero), State(r1, q1, zero, zero),
                    stance_feet(model, r0, q0, height), stance_feet(model, r1, q1, height), 0.02, 0.1, N)


def quad_problem(N=6, **kw):
    model = make_quad()
    model.l_max = 0.75
    task = twist_task(model, N=N)
    sched = PhaseSchedule.standard(task, model.n_legs)
    return model, task, sched, build_nlp(task, sched, CostWeights(), model, **kw)


def trivial_traj(K=4, nc=1, nl=1, dt=0.1):
    X = np.zeros((K, 13))
    X[:, 6] = 1.0
    return Trajectory(X, np.zeros((K, nc, 3)), np.zeros((K, nl, 3)), np.full(K - 1, dt),
                      np.zeros(K, dtype=int), np.ones((K, nl), dtype=bool))


# -- cost terms -----------------------------------------------------------------

def test_smoothness_examples():
    w = CostWeights()
    tr = trivial_traj()
    tr.forces[:] = 5.0
    tr.feet[:] = 0.3
    assert cost_smoothness(tr, w) == 0.0
    tr.forces[2:, 0] = [15.0, 5.0, 5.0]
    assert np.isclose(cost_smoothness(tr, w), 100.0 ** 2 * w.w_smooth_force)
    tr.dt[:] = 0.2
    assert np.isclose(cost_smoothness(tr, w), 100.0 ** 2 * w.w_smooth_force / 4)


def test_energy_examples():
    w = CostWeights()
    tr = trivial_traj()
    assert cost_energy(tr, w) == 0.0
    tr.X[1, 7:10] = [1, 2, 2]
    assert np.isclose(cost_energy(tr, w), w.w_H * 9)
    tr.X[2, 10:13] = [0.3, -1.0, 0.5]
    before = cost_energy(tr, w)
    R = quat_to_rot(quat_from_yaw(0.7)) @ quat_to_rot(np.array([0.3, 0.1, 0, 1]) / np.linalg.norm([0.3, 0.1, 0, 1]))
    tr.X[:, 7:10] = tr.X[:, 7:10] @ R.T
    tr.X[:, 10:13] = tr.X[:, 10:13] @ R.T
    assert np.isclose(cost_energy(tr, w), before)


def test_time_examples():
    w = CostWeights()
    tr = trivial_traj(K=51, dt=0.02)
    assert np.isclose(cost_time(tr, w), w.w_time * 0.02)
    tr.dt[:] = 0.0
    assert cost_time(tr, w) == 0.0
    tr.dt[:] = 0.02
    c0 = cost_time(tr, w)
    tr.dt[7] += 1e-3
    assert cost_time(tr, w) > c0


def test_final_orientation_examples():
    model = make_quad()
    w = CostWeights()
    task = twist_task(model)
    tr = trivial_traj(K=3, nc=4, nl=4)
    tr.feet[-1] = task.p_fin
    tr.X[-1] = task.x_fin.as_vector()
    assert np.isclose(cost_final_orientation(tr, task, w, model), 0.0, atol=1e-20)
    tr.X[-1, 3:7] = quat_identity()
    assert np.isclose(cost_final_orientation(tr, task, w, model), w.w_qfin * (2 - np.sqrt(2)))
    tr.X[-1, 3:7] = -quat_identity()
    assert np.isclose(cost_final_orientation(tr, task, w, model), w.w_qfin * (2 - np.sqrt(2)))
    tr.X[-1] = task.x_fin.as_vector()
    tr.X[-1, 3:7] *= -1
    assert np.isclose(cost_final_orientation(tr, task, w, model), 0.0, atol=1e-20)


def test_weights_nonnegative():
    with pytest.raises(ValueError):
        CostWeights(w_H=-1.0)


def test_friction_pyramid_examples():
    P = friction_pyramid_matrix(0.7)
    assert P.shape == (4, 3)
    v = P @ [0, 0, 100.0]
    assert np.all(v <= 0) and np.allclose(v, -70.0)
    assert np.isclose((P @ [71.0, 0, 100.0]).max(), 1.0)
    assert np.all(P @ np.zeros(3) == 0)
    with pytest.raises(ValueError):
        friction_pyramid_matrix(0.0)


def test_grf_limit_examples():
    f = grf_limit_from_torques(np.eye(3), [40.0, 40.0, 40.0])
    assert np.allclose(f, 40.0)
    J = np.array([[0.1, 0.3, 0.0], [0.2, -0.1, 0.4], [0.0, 0.5, 0.2]])
    tau = np.array([10.0, 20.0, 30.0])
    assert np.allclose(grf_limit_from_torques(J, 2 * tau), 2 * grf_limit_from_torques(J, tau))
    assert grf_limit_from_torques(J, tau, f_max_z=123.0)[2] == 123.0
    assert grf_limit_from_torques(f_max_z=50.0)[2] == 50.0
    with pytest.raises(MissingJacobian):
        grf_limit_from_torques()


# -- structure -------------------------------------------------------------------

@pytest.mark.parametrize("maker", [make_quad, make_biped])
def test_constraint_count_audit(maker):
    model = maker()
    model.l_max = 0.8
    task = twist_task(model, N=9, height=0.5 if model.foot_type == "point" else 0.6)
    sched = PhaseSchedule.standard(task, model.n_legs)
    for flag in (True, False):
        prob = build_nlp(task, sched, CostWeights(), model, final_orientation_in_cost=flag)
        counts = expected_counts(sched, model, flag)
        z = prob.meta["z0"]
        assert prob.n == counts["n_vars"]
        assert len(prob.eq(z)) == counts["n_eq"]
        assert len(prob.ineq(z)) == counts["n_ineq"]
        assert len(prob.residuals(z)) == counts["n_cost"]
    lay = prob.meta["layout"]
    per_knot = lay.per_knot_counts()
    stance = 13 + 3 * model.n_contacts + 3 * model.n_legs
    assert per_knot.max() == stance and per_knot.min() == 13 + 3 * model.n_legs


def test_per_knot_variables_quad_and_biped():
    # full-stance knots: 13 state + forces + foot positions
    q, b = make_quad(), make_biped()
    assert 13 + 3 * q.n_contacts + 3 * q.n_legs == 37
    assert 13 + 3 * b.n_contacts + 3 * b.n_legs == 43


def test_srbm_twin_same_structure():
    model, task, sched, prob = quad_problem()
    srbm = model.with_leg_masses(np.zeros(4))
    p2 = build_nlp(task, sched, CostWeights(), srbm)
    z = prob.meta["z0"]
    assert p2.n == prob.n
    assert np.array_equal(p2.lb, prob.lb) and np.array_equal(p2.ub, prob.ub)
    assert len(p2.eq(z)) == len(prob.eq(z))
    assert (p2.eq_jac(z) != 0).nnz <= prob.eq_jac(z).nnz


@pytest.mark.parametrize("which", ["eq", "ineq", "residuals"])
def test_analytic_jacobians_match_finite_differences(which):
    model, task, sched, prob = quad_problem()
    z = prob.meta["z0"] + np.random.default_rng(0).normal(size=prob.n) * 0.01
    f = getattr(prob, which)
    J = getattr(prob, which + "_jac")(z).toarray()
    Jd = jacobian(f, z)
    assert np.abs(J - Jd).max() <= 1e-6 * max(1.0, np.abs(Jd).max())


def test_biped_jacobians_match():
    model = make_biped()
    task = twist_task(model, N=6, height=0.6)
    prob = build_nlp(task, PhaseSchedule.standard(task, 2), CostWeights(), model)
    z = prob.meta["z0"] + np.random.default_rng(1).normal(size=prob.n) * 0.01
    for which in ("eq", "ineq", "residuals"):
        J = getattr(prob, which + "_jac")(z).toarray()
        Jd = jacobian(getattr(prob, which), z)
        assert np.abs(J - Jd).max() <= 1e-6 * max(1.0, np.abs(Jd).max())


def test_schedule_errors():
    model = make_quad()
    task = twist_task(model)
    on, off = [True] * 4, [False] * 4
    bad_target = PhaseSchedule([Phase("takeoff", 2, on, None), Phase("flight", 2, off), Phase("post_landing", 2, on, list(task.p_fin))])
    with pytest.raises(InconsistentSchedule):
        build_nlp(task, bad_target, CostWeights(), model)
    flight_contact = PhaseSchedule([Phase("takeoff", 2, on, list(task.p_ini)), Phase("flight", 2, on, list(task.p_ini)), Phase("post_landing", 2, on, list(task.p_fin))])
    with pytest.raises(InconsistentSchedule):
        build_nlp(task, flight_contact, CostWeights(), model)
    uneven = PhaseSchedule([Phase("takeoff", 1, on, list(task.p_ini)), Phase("flight", 3, off), Phase("post_landing", 2, on, list(task.p_fin))])
    with pytest.raises(InconsistentSchedule):
        build_nlp(task, uneven, CostWeights(), model)
    task.N = 7
    with pytest.raises(InconsistentSchedule):
        PhaseSchedule.standard(task, 4)


def test_bound_errors():
    model = make_quad()
    task = twist_task(model)
    task.t_min, task.t_max = 0.2, 0.1
    with pytest.raises(InfeasibleBounds):
        build_nlp(task, PhaseSchedule.standard(task, 4), CostWeights(), model)
    task = twist_task(model)
    task.p_ini = np.tile(task.x_ini.r - [0, 0, 0.5 * model.l_min], (4, 1))  # feet closer than l_min
    with pytest.raises(InfeasibleBounds):
        build_nlp(task, PhaseSchedule.standard(task, 4), CostWeights(), model)


# -- extraction -------------------------------------------------------------------

def test_extract_roundtrip_and_elimination_contract():
    model, task, sched, prob = quad_problem()
    z = prob.meta["z0"] + np.random.default_rng(2).normal(size=prob.n)
    tr = extract_trajectory(z, prob)
    assert np.array_equal(pack_trajectory(tr, prob), z)
    flight = tr.flight_knots()
    assert len(flight) == 2
    assert np.all(tr.forces[flight] == 0.0)
    for j in range(3):
        seg = np.flatnonzero(tr.knot_phase[:-1] == j)
        assert np.all(tr.dt[seg] == tr.dt[seg[0]])
    with pytest.raises(LengthMismatch):
        extract_trajectory(z[:-1], prob)


def test_vector_residuals_match_cost_functions():
    model, task, sched, prob = quad_problem()
    z = prob.meta["z0"] + np.random.default_rng(3).normal(size=prob.n) * 0.05
    z[prob.index_map["dt"]] = [0.03, 0.05, 0.04]
    tr = extract_trajectory(z, prob)
    r = prob.residuals(z)
    assert np.isclose(r @ r, total_cost(tr, task, CostWeights(), model), rtol=1e-12)


def test_initial_guess_properties():
    model, task, sched, prob = quad_problem()
    tr = extract_trajectory(prob.meta["z0"], prob)
    assert np.allclose(tr.X[0], task.x_ini.as_vector())
    assert np.allclose(tr.X[-1], task.x_fin.as_vector())
    assert np.allclose(tr.dt, 0.5 * (task.t_min + task.t_max))
    stance = np.flatnonzero(tr.contact.all(axis=1))
    assert np.allclose(tr.forces[stance, :, 2].sum(axis=1), -model.total_mass * model.gravity[2])
    assert np.allclose(np.linalg.norm(tr.X[:, 3:7], axis=1), 1.0)


# -- solving ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def solved_small():
    model, task, sched, prob = quad_problem(N=9)
    z, rep = solve_nlp(prob, prob.meta["z0"], NlpSolverConfig(constraint_tol=1e-8, kkt_tol=1e-4))
    return model, task, prob, z, rep


def test_small_twist_solves(solved_small):
    model, task, prob, z, rep = solved_small
    assert rep.converged
    assert prob.violation(z) <= 1e-8
    viol = [h["violation"] for h in rep.history if h["accepted"]]
    assert all(b <= a for a, b in zip(viol, viol[1:]))


def test_open_loop_resimulation_matches_knots(solved_small):
    model, task, prob, z, rep = solved_small
    tr = extract_trajectory(z, prob)
    X = resimulate(tr, model)
    eps = prob.violation(z)
    N = tr.n_knots - 1
    assert np.abs(X - tr.X).max() <= max(eps, 1e-12) * N * 10


def test_elimination_preserves_optimum():
    model, task, sched, p1 = quad_problem(N=9)
    p2 = build_nlp(task, sched, CostWeights(), model, eliminate_flight_forces=False)
    assert p2.n > p1.n
    cfg = NlpSolverConfig(constraint_tol=1e-10, kkt_tol=5e-6)
    z1, r1 = solve_nlp(p1, p1.meta["z0"], cfg)
    z2, r2 = solve_nlp(p2, p2.meta["z0"], cfg)
    assert r1.converged and r2.converged
    assert abs(r1.objective - r2.objective) <= 1e-8 * max(1.0, abs(r1.objective)) + 1e-8
    t1, t2 = extract_trajectory(z1, p1), extract_trajectory(z2, p2)
    assert np.abs(t1.X - t2.X).max() < 1e-5
