import numpy as np
import pytest
import scipy.sparse as sp

from lljump.solver.derivatives import SparseJacobian, color_columns, gradient, jacobian
from lljump.solver.nlp import NlpProblem, NlpSolverConfig, solve_nlp
from lljump.solver.report import SolveReport, Status


# -- finite differences -------------------------------------------------------

def test_gradient_of_squared_norm():
    g = gradient(lambda z: z @ z, np.array([1.0, 2.0]))
    assert np.allclose(g, [2.0, 4.0], atol=1e-6)


def test_analytic_derivatives_take_precedence():
    g = gradient(lambda z: z @ z, np.array([1.0, 2.0]), grad=lambda z: np.array([7.0, 7.0]))
    assert np.array_equal(g, [7.0, 7.0])
    J = jacobian(lambda z: z, np.ones(2), jac=lambda z: np.eye(2) * 3)
    assert np.array_equal(J, np.eye(2) * 3)


def test_linear_jacobian_exact():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(5, 4))
    J = jacobian(lambda z: A @ z, rng.normal(size=4))
    assert np.abs(J - A).max() <= 1e-9


def test_colored_jacobian_matches_dense():
    rng = np.random.default_rng(1)
    n = 30
    # banded nonlinear residual: r_i depends on z_i, z_{i+1}, z_{i+2}
    def F(z):
        return np.sin(z[:-2]) * z[1:-1] + z[2:] ** 2
    pattern = sp.diags([1, 1, 1], [0, 1, 2], shape=(n - 2, n))
    colors = color_columns(pattern)
    assert colors.max() + 1 == 3
    z = rng.normal(size=n)
    Js = SparseJacobian(pattern)(F, z).toarray()
    Jd = jacobian(F, z)
    assert np.abs(Js - Jd).max() < 1e-12


def test_dynamics_jacobian_step_cross_validation():
    from conftest import make_quad
    from lljump.kernels import dynamics_batch
    from lljump.model import feet_from_body_offsets, State, quat_from_yaw

    model = make_quad()
    s = State([0.0, 0.0, 0.45], quat_from_yaw(0.3), [1.0, 2.0, 3.0], [0.2, -0.1, 0.4])
    feet = np.array([lg.attach_offset for lg in model.legs]) + [0, 0, -0.45]
    p = feet_from_body_offsets(s, feet)
    f = np.tile([1.0, -2.0, 80.0], (4, 1))

    def F(x):
        return dynamics_batch(x[None], f[None], p[None], model.params)[0]

    x0 = s.as_vector()
    Jc = jacobian(F, x0)
    Jo = np.empty_like(Jc)
    h = 1e-8
    for j in range(13):
        xp = x0.copy()
        xp[j] += h
        Jo[:, j] = (F(xp) - F(x0)) / h
    scale = np.abs(Jc).max()
    assert np.abs(Jc - Jo).max() <= 1e-4 * scale


# -- NLP -----------------------------------------------------------------------

def test_unconstrained_convex_quadratic():
    rng = np.random.default_rng(2)
    M = rng.normal(size=(6, 4))
    b = rng.normal(size=6)
    prob = NlpProblem(n=4, residuals=lambda z: M @ z - b, residuals_jac=lambda z: M)
    z_star = np.linalg.lstsq(M, b, rcond=None)[0]
    for z0 in (np.zeros(4), rng.normal(size=4) * 10):
        z, rep = solve_nlp(prob, z0, NlpSolverConfig(kkt_tol=1e-10))
        assert rep.status == Status.CONVERGED
        assert np.abs(z - z_star).max() <= 1e-8


def test_unconstrained_quadratic_lbfgs():
    G = np.array([[3.0, 1.0], [1.0, 2.0]])
    q = np.array([1.0, -1.0])
    prob = NlpProblem(n=2, cost=lambda z: 0.5 * z @ G @ z + q @ z, cost_grad=lambda z: G @ z + q)
    z, rep = solve_nlp(prob, np.array([5.0, 5.0]), NlpSolverConfig(kkt_tol=1e-10))
    assert rep.converged
    assert np.abs(z - np.linalg.solve(G, -q)).max() <= 1e-8


def rosenbrock_problem(as_residuals=True):
    ineq = lambda z: np.array([z[0] ** 2 + z[1] ** 2 - 2.0])
    if as_residuals:
        return NlpProblem(n=2, residuals=lambda z: np.array([1 - z[0], 10 * (z[1] - z[0] ** 2)]), ineq=ineq)
    return NlpProblem(n=2, cost=lambda z: (1 - z[0]) ** 2 + 100 * (z[1] - z[0] ** 2) ** 2, ineq=ineq)


def test_rosenbrock_grid_oracle():
    # the constrained optimum found by a grid search is (1, 1)
    a = np.linspace(-1.5, 1.5, 601)
    A, B = np.meshgrid(a, a)
    f = (1 - A) ** 2 + 100 * (B - A ** 2) ** 2
    f[A ** 2 + B ** 2 > 2 + 1e-12] = np.inf
    i = np.unravel_index(np.argmin(f), f.shape)
    assert abs(A[i] - 1) < 0.01 and abs(B[i] - 1) < 0.01


@pytest.mark.parametrize("as_residuals", [True, False])
def test_constrained_rosenbrock(as_residuals):
    prob = rosenbrock_problem(as_residuals)
    z, rep = solve_nlp(prob, np.array([-1.2, 1.0]), NlpSolverConfig(kkt_tol=1e-9, constraint_tol=1e-9))
    assert rep.status == Status.CONVERGED
    assert np.abs(z - 1.0).max() <= 1e-5


def double_integrator_problem(dt=0.1, K=5):
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([0.5 * dt * dt, dt])
    nx = 2 * K
    nu = K - 1
    x_ini, x_fin = np.zeros(2), np.array([1.0, 0.0])

    def eq(z):
        X = z[:nx].reshape(K, 2)
        U = z[nx:]
        defects = X[1:] - (X[:-1] @ A.T + U[:, None] * B)
        return np.concatenate([X[0] - x_ini, defects.ravel(), X[-1] - x_fin])

    def res(z):
        return z[nx:]

    M = np.column_stack([np.linalg.matrix_power(A, K - 2 - k) @ B for k in range(K - 1)])
    d = x_fin - np.linalg.matrix_power(A, K - 1) @ x_ini
    u_star = M.T @ np.linalg.solve(M @ M.T, d)
    return NlpProblem(n=nx + nu, residuals=res, eq=eq), u_star, nx


def test_double_integrator_lq_oracle():
    prob, u_star, nx = double_integrator_problem()
    z, rep = solve_nlp(prob, np.zeros(prob.n), NlpSolverConfig(kkt_tol=1e-6, constraint_tol=1e-8))
    assert rep.status == Status.CONVERGED
    assert np.abs(z[nx:] - u_star).max() <= 1e-5


def test_bounds_are_respected():
    prob = NlpProblem(n=2, lb=[0.5, -np.inf], ub=[np.inf, 0.2], residuals=lambda z: z - np.array([0.0, 1.0]))
    z, rep = solve_nlp(prob, np.array([3.0, -3.0]))
    assert rep.converged
    assert np.allclose(z, [0.5, 0.2], atol=1e-9)


def test_determinism_and_report_roundtrip():
    prob = rosenbrock_problem()
    z1, r1 = solve_nlp(prob, np.array([-1.2, 1.0]))
    z2, r2 = solve_nlp(prob, np.array([-1.2, 1.0]))
    assert np.array_equal(z1, z2)
    assert r1.history == r2.history
    import json
    d = json.loads(r1.to_json_line(scenario="x"))
    back = SolveReport.from_dict(d)
    assert back.status == r1.status and back.iterations == r1.iterations


def test_cost_scaling_leaves_minimizer():
    prob, u_star, nx = double_integrator_problem()
    scaled = NlpProblem(n=prob.n, residuals=lambda z: 10.0 * prob.residuals(z), eq=prob.eq)
    cfg = NlpSolverConfig(kkt_tol=1e-7, constraint_tol=1e-9)
    z1, _ = solve_nlp(prob, np.zeros(prob.n), cfg)
    z2, _ = solve_nlp(scaled, np.zeros(prob.n), cfg)
    assert np.abs(z1 - z2).max() <= 1e-5


def test_violation_history_monotone():
    # circle-constrained nonconvex problem
    prob = NlpProblem(
        n=3,
        residuals=lambda z: np.array([z[0] - 2, z[1] + 1, z[2] * z[0]]),
        eq=lambda z: np.array([z @ z - 1.0]),
        ineq=lambda z: np.array([z[0] + z[1] - 0.5]),
    )
    z, rep = solve_nlp(prob, np.array([0.1, 0.1, 0.1]))
    assert rep.converged
    viol = [h["violation"] for h in rep.history if h["accepted"]]
    assert all(b <= a for a, b in zip(viol, viol[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        NlpSolverConfig(mu_growth=1.0)
    with pytest.raises(ValueError):
        NlpSolverConfig(kkt_tol=0.0)


def test_max_iters_reported_not_raised():
    prob = rosenbrock_problem()
    z, rep = solve_nlp(prob, np.array([-1.2, 1.0]), NlpSolverConfig(max_outer_iters=1, max_inner_iters=2, kkt_tol=1e-12))
    assert rep.status == Status.MAX_ITERS


def test_locally_infeasible_reported():
    # z0^2 + z1^2 = -1 has no solution; the violation bottoms out at 1
    prob = NlpProblem(n=2, residuals=lambda z: z, eq=lambda z: np.array([z @ z + 1.0]))
    z, rep = solve_nlp(prob, np.array([0.3, -0.2]))
    assert rep.status == Status.INFEASIBLE
    assert rep.constraint_violation >= 1.0 - 1e-9
