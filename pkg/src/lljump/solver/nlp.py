"""Augmented-Lagrangian NLP solver.

Problem::

    minimize    ||r(z)||^2 + f(z)
    subject to  c(z) = 0,  g(z) <= 0,  lb <= z <= ub

Bounds are handled by projection. Equalities use the classic
``lambda'c + mu/2 ||c||^2`` term and inequalities the squared hinge
``(1/2mu) (max(0, nu + mu g)^2 - nu^2)``. Since every piece is a sum of
squares when ``f`` is absent, the inner problem is a bound-constrained
nonlinear least-squares problem solved by projected Levenberg-Marquardt on
sparse normal equations. With a general scalar cost the inner solver falls
back to L-BFGS-B.

Outer iterates that increase the constraint violation are rejected (the
penalty grows and the inner solve restarts from the last accepted point), so
the reported violation history is non-increasing.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .derivatives import REL_STEP, SparseJacobian, gradient, jacobian
from .report import SolveReport, Status

log = logging.getLogger(__name__)

_EMPTY = np.zeros(0)


@dataclass
class NlpSolverConfig:
    max_outer_iters: int = 500
    max_inner_iters: int = 200
    kkt_tol: float = 1e-4
    constraint_tol: float = 1e-4
    mu0: float = 10.0
    mu_growth: float = 10.0
    mu_max: float = 1e12
    multiplier_bound: float = 1e8
    fd_rel_step: float = REL_STEP
    inner: str = "auto"  # "auto" | "gauss_newton" | "lbfgs"
    lbfgs_memory: int = 10

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.constraint_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.mu_growth <= 1:
            raise ValueError("penalty growth factor must exceed 1")
        if self.mu0 <= 0 or self.multiplier_bound <= 0:
            raise ValueError("mu0 and multiplier_bound must be positive")
        if self.inner not in ("auto", "gauss_newton", "lbfgs"):
            raise ValueError(f"unknown inner solver {self.inner!r}")


@dataclass(eq=False)
class NlpProblem:
    """Evaluators plus optional derivatives or sparsity patterns.

    For each of ``residuals``, ``eq`` and ``ineq`` the Jacobian comes from the
    analytic ``*_jac`` if given, else from colored central differences over
    ``*_pattern``, else from dense central differences.
    """

    n: int
    lb: np.ndarray = None
    ub: np.ndarray = None
    residuals: Optional[Callable] = None
    residuals_jac: Optional[Callable] = None
    residuals_pattern: Optional[object] = None
    cost: Optional[Callable] = None
    cost_grad: Optional[Callable] = None
    eq: Optional[Callable] = None
    eq_jac: Optional[Callable] = None
    eq_pattern: Optional[object] = None
    ineq: Optional[Callable] = None
    ineq_jac: Optional[Callable] = None
    ineq_pattern: Optional[object] = None
    index_map: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lb = np.full(self.n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).copy()
        self.ub = np.full(self.n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).copy()
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise ValueError("bounds must have length n")
        self._sparse_fd = {}

    # evaluation
    def r(self, z):
        return _EMPTY if self.residuals is None else np.asarray(self.residuals(z), dtype=float)

    def c(self, z):
        return _EMPTY if self.eq is None else np.asarray(self.eq(z), dtype=float)

    def g(self, z):
        return _EMPTY if self.ineq is None else np.asarray(self.ineq(z), dtype=float)

    def objective(self, z):
        r = self.r(z)
        val = float(r @ r)
        if self.cost is not None:
            val += float(self.cost(z))
        return val

    def violation(self, z, c=None, g=None):
        c = self.c(z) if c is None else c
        g = self.g(z) if g is None else g
        v = np.abs(c).max(initial=0.0)
        v = max(v, np.max(g, initial=0.0))
        return float(v)

    def _jac(self, key, fun, analytic, pattern, z, rel):
        if fun is None:
            return sp.csr_matrix((0, self.n))
        if analytic is not None:
            J = analytic(z)
            return J.tocsr() if sp.issparse(J) else sp.csr_matrix(np.asarray(J, dtype=float))
        if pattern is not None:
            fd = self._sparse_fd.get((key, rel))
            if fd is None:
                fd = self._sparse_fd[(key, rel)] = SparseJacobian(pattern, rel)
            return fd(fun, z)
        return sp.csr_matrix(jacobian(fun, z, rel=rel))

    def jac_r(self, z, rel=REL_STEP):
        return self._jac("r", self.residuals, self.residuals_jac, self.residuals_pattern, z, rel)

    def jac_c(self, z, rel=REL_STEP):
        return self._jac("c", self.eq, self.eq_jac, self.eq_pattern, z, rel)

    def jac_g(self, z, rel=REL_STEP):
        return self._jac("g", self.ineq, self.ineq_jac, self.ineq_pattern, z, rel)

    def grad_cost(self, z, rel=REL_STEP):
        out = np.zeros(self.n)
        r = self.r(z)
        if len(r):
            out += 2.0 * (self.jac_r(z, rel).T @ r)
        if self.cost is not None:
            out += gradient(self.cost, z, self.cost_grad, rel)
        return out


def _project(z, lb, ub):
    return np.minimum(np.maximum(z, lb), ub)


def _projected_grad(z, grad, lb, ub):
    return z - _project(z - grad, lb, ub)


class _Augmented:
    """Augmented Lagrangian at fixed multipliers and penalty."""

    def __init__(self, prob, lam, nu, mu, rel):
        self.p, self.lam, self.nu, self.mu, self.rel = prob, lam, nu, mu, rel
        self.s = np.sqrt(0.5 * mu)
        self.const = (lam @ lam + nu @ nu) / (2 * mu)

    def stacked(self, z):
        """Residual vector R with value = ||R||^2 - const (+ general cost)."""
        p = self.p
        c, g = p.c(z), p.g(z)
        return np.concatenate([p.r(z), self.s * (c + self.lam / self.mu), self.s * np.maximum(0.0, g + self.nu / self.mu)])

    def value(self, z, R=None):
        R = self.stacked(z) if R is None else R
        v = float(R @ R) - self.const
        if self.p.cost is not None:
            v += float(self.p.cost(z))
        return v

    def stacked_jac(self, z):
        p = self.p
        g = p.g(z)
        Jg = p.jac_g(z, self.rel)
        if len(g):
            act = (g + self.nu / self.mu > 0).astype(float)
            Jg = sp.diags(act * self.s) @ Jg
        return sp.vstack([p.jac_r(z, self.rel), self.s * p.jac_c(z, self.rel), Jg], format="csr")

    def grad(self, z):
        R = self.stacked(z)
        out = 2.0 * (self.stacked_jac(z).T @ R)
        if self.p.cost is not None:
            out = out + gradient(self.p.cost, z, self.p.cost_grad, self.rel)
        return out


class _LmSystem:
    """Damped Gauss-Newton normal equations restricted to the free variables."""

    def __init__(self, J, R, free):
        self.n = J.shape[1]
        self.free = free
        Jf = J[:, free]
        self.H = (Jf.T @ Jf).tocsc()
        self.rhs = -(Jf.T @ R)
        diag = self.H.diagonal()
        self.dscale = np.maximum(diag, 1e-12 * max(1.0, diag.max(initial=1.0)))

    def step(self, damp):
        try:
            df = spla.spsolve(self.H + sp.diags(damp * self.dscale, format="csc"), self.rhs)
        except RuntimeError:
            return None
        if not np.all(np.isfinite(df)):
            return None
        step = np.zeros(self.n)
        step[self.free] = df
        return step


def _lm_inner(aug, z, lb, ub, tol, max_iter, damp=1e-3):
    """Projected Levenberg-Marquardt on ||R(z)||^2 with box bounds.

    Returns ``(z, iterations, converged, damping)``; the damping is carried
    into the next call (capped so a stalled call does not poison the next).
    """
    R = aug.stacked(z)
    phi = float(R @ R)
    if not np.isfinite(phi):
        return z, 0, False, damp
    damp = min(damp, 1e-3)
    nu_lm = 2.0
    J = aug.stacked_jac(z)
    grad = 2.0 * (J.T @ R)
    pg_norm = np.abs(_projected_grad(z, grad, lb, ub)).max(initial=0.0)
    it = 0
    for it in range(1, max_iter + 1):
        if pg_norm <= tol:
            return z, it - 1, True, damp
        # variables pinned at a bound with the gradient pushing outward stay fixed
        span = 1e-12 * np.maximum(1.0, np.abs(z))
        fixed = ((z <= lb + span) & (grad > 0)) | ((z >= ub - span) & (grad < 0))
        at_lb, at_ub = z <= lb + span, z >= ub - span
        while True:
            A_solve = _LmSystem(J, R, np.flatnonzero(~fixed))
            step = A_solve.step(damp)
            if step is None:
                break
            # a step that leaves the box through a variable already on its bound
            # would be cut by the projection; fix those and solve again
            blocked = ~fixed & ((at_lb & (step < 0)) | (at_ub & (step > 0)))
            if not blocked.any():
                break
            fixed |= blocked
        while True:
            step = A_solve.step(damp)
            if step is not None:
                z_new = _project(z + step, lb, ub)
                d = z_new - z
                if np.abs(d).max(initial=0.0) <= 1e-15 * (1 + np.abs(z).max()):
                    return z, it, False, damp
                R_new = aug.stacked(z_new)
                phi_new = float(R_new @ R_new)
                JD = J @ d
                pred = phi - float((R + JD) @ (R + JD))
                actual = phi - phi_new
                ok = np.isfinite(phi_new) and pred > 0
                if ok and pred <= 1e-12 * phi:
                    # cost differences are round-off here: judge by the gradient
                    J_new = aug.stacked_jac(z_new)
                    grad_new = 2.0 * (J_new.T @ R_new)
                    pg_new = np.abs(_projected_grad(z_new, grad_new, lb, ub)).max(initial=0.0)
                    if pg_new < pg_norm:
                        z, R, phi, J, grad, pg_norm = z_new, R_new, phi_new, J_new, grad_new, pg_new
                        damp = max(damp / 3, 1e-12)
                        break
                elif ok and actual > 1e-4 * pred:
                    ratio = min(actual / pred, 1.0)
                    damp = max(damp * max(1 / 3, 1 - (2 * ratio - 1) ** 3), 1e-12)
                    z, R, phi = z_new, R_new, phi_new
                    J = aug.stacked_jac(z)
                    grad = 2.0 * (J.T @ R)
                    pg_norm = np.abs(_projected_grad(z, grad, lb, ub)).max(initial=0.0)
                    break
            damp *= nu_lm
            nu_lm *= 2
            if damp > 1e16:
                return z, it, False, 1e-3
        nu_lm = 2.0
    return z, it, pg_norm <= tol, damp


def _lbfgs_inner(aug, z, lb, ub, tol, max_iter, memory):
    res = scipy.optimize.minimize(
        aug.value, z, jac=aug.grad, method="L-BFGS-B",
        bounds=list(zip(np.where(np.isfinite(lb), lb, None), np.where(np.isfinite(ub), ub, None))),
        options={"maxcor": memory, "maxiter": max_iter, "gtol": tol, "ftol": 0.0},
    )
    return _project(res.x, lb, ub), int(res.nit), bool(res.success)


def _kkt(prob, z, lam, nu, g, rel):
    grad = prob.grad_cost(z, rel)
    if len(lam):
        grad = grad + prob.jac_c(z, rel).T @ lam
    if len(nu):
        grad = grad + prob.jac_g(z, rel).T @ nu
    stat = np.abs(_projected_grad(z, grad, prob.lb, prob.ub)).max(initial=0.0)
    comp = np.abs(nu * np.minimum(g, 0.0)).max(initial=0.0)
    m = len(lam) + len(nu)
    # multiplier-based scaling so large but consistent duals do not stall the test
    s_d = max(100.0, (np.abs(lam).sum() + np.abs(nu).sum()) / max(m, 1)) / 100.0
    return float(max(stat, comp) / s_d)


def _violation_stationary(prob, z, c, g, rel, tol=1e-6):
    """True when z (nearly) minimizes 0.5*|c|^2 + 0.5*|max(g, 0)|^2 over the bounds."""
    grad = np.zeros(prob.n)
    if len(c):
        grad = grad + prob.jac_c(z, rel).T @ c
    if len(g):
        grad = grad + prob.jac_g(z, rel).T @ np.maximum(g, 0.0)
    return np.abs(_projected_grad(z, grad, prob.lb, prob.ub)).max(initial=0.0) <= tol * max(1.0, float(c @ c + np.maximum(g, 0) @ np.maximum(g, 0)))


def solve_nlp(problem: NlpProblem, z0, cfg: Optional[NlpSolverConfig] = None):
    """Solve ``problem`` from ``z0``; returns ``(z, SolveReport)``.

    Never raises on solver trouble: failures are reported as MaxIters,
    Infeasible (violation stuck at the largest penalty) or NumericalFailure.
    """
    cfg = cfg or NlpSolverConfig()
    t0 = time.perf_counter()
    prob = problem
    lb, ub = prob.lb, prob.ub
    z = _project(np.asarray(z0, dtype=float).copy(), lb, ub)
    rel = cfg.fd_rel_step
    inner = cfg.inner
    if inner == "auto":
        inner = "lbfgs" if prob.cost is not None else "gauss_newton"
    if inner == "gauss_newton" and prob.cost is not None:
        raise ValueError("gauss_newton inner solver needs a pure least-squares cost")

    c, g = prob.c(z), prob.g(z)
    lam, nu = np.zeros(len(c)), np.zeros(len(g))
    mu = cfg.mu0
    omega = 0.1
    viol = prob.violation(z, c, g)
    history = []
    inner_total = 0
    status = Status.MAX_ITERS
    kkt = np.inf
    if not np.isfinite(viol):
        return z, SolveReport(Status.NUMERICAL_FAILURE, 0, np.inf, np.inf, time.perf_counter() - t0, message="non-finite residuals at z0")

    damp = 1e-3
    viol_prev = np.inf
    stalled = False
    stagnant = 0
    message = ""
    k = 0
    for k in range(1, cfg.max_outer_iters + 1):
        aug = _Augmented(prob, lam, nu, mu, rel)
        s_d = max(100.0, (np.abs(lam).sum() + np.abs(nu).sum()) / max(len(lam) + len(nu), 1)) / 100.0
        tol = max(omega, 0.2 * cfg.kkt_tol * s_d)
        if inner == "gauss_newton":
            z_try, nit, converged_inner, damp = _lm_inner(aug, z, lb, ub, tol, cfg.max_inner_iters, damp)
        else:
            z_try, nit, converged_inner = _lbfgs_inner(aug, z, lb, ub, tol, cfg.max_inner_iters, cfg.lbfgs_memory)
        inner_total += nit
        c_try, g_try = prob.c(z_try), prob.g(z_try)
        viol_try = prob.violation(z_try, c_try, g_try)
        if not np.isfinite(viol_try):
            status = Status.NUMERICAL_FAILURE
            break
        entry = {"outer": k, "mu": mu, "inner": nit, "violation": viol_try}
        if viol_try > viol and k > 1:
            # keep the violation history monotone: retry from the accepted point
            entry["accepted"] = False
            history.append(entry)
            mu *= cfg.mu_growth
            if mu > cfg.mu_max:
                status = Status.NUMERICAL_FAILURE
                break
            continue
        moved = not np.array_equal(z_try, z)
        z, c, g, viol = z_try, c_try, g_try, viol_try
        bound = cfg.multiplier_bound
        lam_new = np.clip(lam + mu * c, -bound, bound)
        nu_new = np.clip(np.maximum(0.0, nu + mu * g), 0.0, bound)
        kkt = _kkt(prob, z, lam_new, nu_new, g, rel)
        entry.update(accepted=True, kkt=kkt, objective=prob.objective(z))
        history.append(entry)
        log.debug("outer %d mu=%.1e viol=%.3e kkt=%.3e inner=%d", k, mu, viol, kkt, nit)
        if viol <= cfg.constraint_tol and kkt <= cfg.kkt_tol:
            lam, nu = lam_new, nu_new
            status = Status.CONVERGED
            break
        # first-order multiplier update after every productive inner solve; the
        # penalty grows only when the violation did not shrink enough
        if moved or converged_inner:
            lam, nu = lam_new, nu_new
        if viol > cfg.constraint_tol and viol > 0.25 * viol_prev:
            if mu >= cfg.mu_max:
                # the penalty cannot grow further and the violation is not moving:
                # z is a stationary point of the violation (locally infeasible)
                stagnant = stagnant + 1 if viol > 0.99 * viol_prev else 0
                if stagnant >= 3 and _violation_stationary(prob, z, c, g, rel):
                    status = Status.INFEASIBLE
                    break
                if stagnant >= 10:
                    status = Status.NUMERICAL_FAILURE
                    message = "violation stagnated at the largest penalty"
                    break
            mu = min(mu * cfg.mu_growth, cfg.mu_max)
        viol_prev = viol
        omega = max(0.1 * omega, 1e-3 * cfg.kkt_tol)
        if not moved and k > 1 and not converged_inner:
            # inner solver stalled at the same point twice: no further progress possible
            if stalled:
                infeasible = viol > cfg.constraint_tol and _violation_stationary(prob, z, c, g, rel)
                status = Status.INFEASIBLE if infeasible else Status.NUMERICAL_FAILURE
                break
            stalled = True
        else:
            stalled = False

    return z, SolveReport(
        status=status,
        iterations=k,
        kkt_residual=kkt,
        constraint_violation=viol,
        wall_time=time.perf_counter() - t0,
        inner_iterations=inner_total,
        objective=prob.objective(z),
        multipliers=(lam, nu),
        history=history,
        message=message,
    )
