"""Dense convex QP solver: ADMM (operator splitting) plus active-set polish.

Problem form::

    minimize    0.5 z'Gz + g'z
    subject to  A_eq z  = b_eq
                A_in z <= b_in
                lb <= z <= ub

Internally every constraint is stacked into ``l <= C z <= u`` and solved by
the OSQP-style splitting iteration with an adaptive step parameter. The ADMM
point is then polished by solving the equality-constrained KKT system on the
guessed active set, corrected with a few primal/dual active-set exchanges.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .report import SolveReport, Status

RHO_MIN, RHO_MAX = 1e-6, 1e6
EQ_RHO_SCALE = 1e3


@dataclass
class QpProblem:
    G: np.ndarray
    g: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        n = self.G.shape[0]
        self.g = np.asarray(self.g, dtype=float).reshape(n)
        if self.G.shape != (n, n):
            raise ValueError("G must be square")
        if not np.allclose(self.G, self.G.T, atol=1e-12 * max(1.0, np.abs(self.G).max())):
            raise ValueError("G must be symmetric")
        self.A_eq, self.b_eq = _pair(self.A_eq, self.b_eq, n, "eq")
        self.A_in, self.b_in = _pair(self.A_in, self.b_in, n, "in")
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).reshape(n)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).reshape(n)
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub")

    @property
    def n(self):
        return self.G.shape[0]

    def objective(self, z):
        return 0.5 * z @ self.G @ z + self.g @ z

    def violation(self, z):
        v = 0.0
        if len(self.b_eq):
            v = max(v, np.abs(self.A_eq @ z - self.b_eq).max())
        if len(self.b_in):
            v = max(v, np.max(self.A_in @ z - self.b_in, initial=0.0))
        v = max(v, np.max(self.lb - z, initial=0.0), np.max(z - self.ub, initial=0.0))
        return float(v)

    def stacked(self):
        """Rows and limits of ``l <= C z <= u``; bound rows only where finite."""
        n = self.n
        rows = [self.A_eq, self.A_in]
        lo = [self.b_eq, np.full(len(self.b_in), -np.inf)]
        hi = [self.b_eq, self.b_in]
        has_bound = np.isfinite(self.lb) | np.isfinite(self.ub)
        if has_bound.any():
            rows.append(np.eye(n)[has_bound])
            lo.append(self.lb[has_bound])
            hi.append(self.ub[has_bound])
        C = np.vstack(rows) if rows else np.zeros((0, n))
        return C.reshape(-1, n), np.concatenate(lo), np.concatenate(hi)


def _pair(A, b, n, name):
    if A is None:
        return np.zeros((0, n)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.shape != (len(b), n):
        raise ValueError(f"A_{name} has shape {A.shape}, expected {(len(b), n)}")
    return A, b


@dataclass
class QpSettings:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-6
    eps_infeasible: float = 1e-7
    max_iter: int = 4000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adapt_interval: int = 25
    polish: bool = True
    kkt_tol: float = 1e-8


def check_psd(G, jitter_max=1e-10):
    """Cholesky with escalating jitter; returns False when G is not PSD."""
    jitter = 0.0
    scale = max(1.0, float(np.abs(G).max()))
    while True:
        try:
            np.linalg.cholesky(G + jitter * scale * np.eye(len(G)))
            return True
        except np.linalg.LinAlgError:
            jitter = 1e-14 if jitter == 0.0 else jitter * 10
            if jitter > jitter_max:
                return False


def solve_qp(qp: QpProblem, warm_start=None, warm_dual=None, settings: Optional[QpSettings] = None):
    """Solve a convex QP; returns ``(z, report)``.

    ``report.multipliers`` holds the duals of the stacked rows
    ``[A_eq; A_in; finite-bound rows]`` (positive at an active upper limit).
    Pass them back as ``warm_dual`` to try the previous active set first.
    """
    s = settings or QpSettings()
    t0 = time.perf_counter()
    n = qp.n
    if not check_psd(qp.G):
        return np.zeros(n), SolveReport(Status.NUMERICAL_FAILURE, 0, np.inf, np.inf, time.perf_counter() - t0, message="G is not positive semidefinite")
    C, lo, hi = qp.stacked()
    m = C.shape[0]
    eq = lo == hi

    if m == 0:
        z = np.linalg.lstsq(qp.G, -qp.g, rcond=None)[0]
        kkt = float(np.abs(qp.G @ z + qp.g).max(initial=0.0))
        status = Status.CONVERGED if kkt <= s.kkt_tol * (1 + np.abs(qp.g).max(initial=0)) else Status.NUMERICAL_FAILURE
        return z, SolveReport(status, 0, kkt, 0.0, time.perf_counter() - t0, objective=qp.objective(z), multipliers=np.zeros(0))

    # shortcut: previous active set still optimal
    if warm_dual is not None and s.polish and len(warm_dual) == m:
        res = _polish(qp.G, qp.g, C, lo, hi, eq, np.asarray(warm_dual, dtype=float), s)
        if res is not None:
            z, y, kkt = res
            return z, SolveReport(Status.CONVERGED, 0, kkt, qp.violation(z), time.perf_counter() - t0, objective=qp.objective(z), multipliers=y, message="warm active set")

    # row equilibration; duals are mapped back after the loop
    d = 1.0 / np.maximum(np.abs(C).max(axis=1), 1e-12)
    Cs, los, his = C * d[:, None], lo * d, hi * d
    x = np.zeros(n) if warm_start is None else np.clip(np.asarray(warm_start, dtype=float), qp.lb, qp.ub)
    y = np.zeros(m) if warm_dual is None or len(warm_dual) != m else np.asarray(warm_dual, dtype=float) / d
    x, y, it, status = _admm(qp, Cs, los, his, eq, x, y, s)
    y = y * d

    if status == Status.INFEASIBLE:
        return x, SolveReport(status, it, np.inf, qp.violation(x), time.perf_counter() - t0, objective=qp.objective(x), multipliers=y, message="primal infeasibility certificate")

    if s.polish:
        res = _polish(qp.G, qp.g, C, lo, hi, eq, y, s)
        if res is not None:
            z, y, kkt = res
            return z, SolveReport(Status.CONVERGED, it, kkt, qp.violation(z), time.perf_counter() - t0, objective=qp.objective(z), multipliers=y, message="polished")

    kkt = _kkt_residual(qp.G, qp.g, C, lo, hi, eq, x, y)
    if s.polish and status == Status.CONVERGED and kkt > s.kkt_tol:
        # ADMM tolerances met but the polish failed: not tight enough to claim convergence
        status = Status.NUMERICAL_FAILURE
    return x, SolveReport(status, it, kkt, qp.violation(x), time.perf_counter() - t0, objective=qp.objective(x), multipliers=y, message="admm")


def _admm(qp, C, lo, hi, eq, x, y, s):
    zc = np.clip(C @ x, lo, hi)
    rho = s.rho
    rho_vec = np.where(eq, rho * EQ_RHO_SCALE, rho)
    factor = _factor(qp.G, C, rho_vec, s.sigma)
    status = Status.MAX_ITERS
    it = 0
    y_prev = y.copy()
    for it in range(1, s.max_iter + 1):
        rhs = s.sigma * x - qp.g + C.T @ (rho_vec * zc - y)
        xt = scipy.linalg.cho_solve(factor, rhs)
        zt = C @ xt
        x = s.alpha * xt + (1 - s.alpha) * x
        zr = s.alpha * zt + (1 - s.alpha) * zc
        z_new = np.clip(zr + y / rho_vec, lo, hi)
        y_prev = y
        y = y + rho_vec * (zr - z_new)
        zc = z_new

        Cx = C @ x
        Gx = qp.G @ x
        CTy = C.T @ y
        r_prim = np.abs(Cx - zc).max()
        r_dual = np.abs(Gx + qp.g + CTy).max()
        eps_p = s.eps_abs + s.eps_rel * max(np.abs(Cx).max(), np.abs(zc).max())
        eps_d = s.eps_abs + s.eps_rel * max(np.abs(Gx).max(), np.abs(CTy).max(), np.abs(qp.g).max())
        if r_prim <= eps_p and r_dual <= eps_d:
            status = Status.CONVERGED
            break
        if _primal_infeasible(y - y_prev, C, lo, hi, s.eps_infeasible):
            status = Status.INFEASIBLE
            break
        if it % s.adapt_interval == 0:
            num = r_prim / max(np.abs(Cx).max(), np.abs(zc).max(), 1e-30)
            den = r_dual / max(np.abs(Gx).max(), np.abs(CTy).max(), np.abs(qp.g).max(), 1e-30)
            new_rho = float(np.clip(rho * np.sqrt(num / max(den, 1e-30)), RHO_MIN, RHO_MAX))
            if new_rho > 5 * rho or new_rho < rho / 5:  # refactor only on large changes
                rho = float(np.clip(new_rho, rho / 10, rho * 10))
                rho_vec = np.where(eq, rho * EQ_RHO_SCALE, rho)
                factor = _factor(qp.G, C, rho_vec, s.sigma)

    return x, y, it, status


def _factor(G, C, rho_vec, sigma):
    K = G + sigma * np.eye(len(G)) + C.T @ (rho_vec[:, None] * C)
    return scipy.linalg.cho_factor(K)


def _primal_infeasible(dy, C, lo, hi, eps):
    nrm = np.abs(dy).max(initial=0.0)
    if nrm < 1e-12:
        return False
    if np.abs(C.T @ dy).max() > eps * nrm:
        return False
    pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
    with np.errstate(invalid="ignore"):
        terms = np.where(pos > 0, hi * pos, 0.0) + np.where(neg < 0, lo * neg, 0.0)
    val = terms.sum()
    return bool(np.isfinite(val) and val < -eps * nrm)


def _kkt_residual(G, g, C, lo, hi, eq, x, y):
    Cx = C @ x
    stat = np.abs(G @ x + g + C.T @ y).max(initial=0.0)
    prim = max(np.max(Cx - hi, initial=0.0), np.max(lo - Cx, initial=0.0))
    ineq = ~eq
    # y > 0 only at the upper limit, y < 0 only at the lower limit
    sign = 0.0
    if ineq.any():
        yi = y[ineq]
        # on a side with no limit the gap is taken as 1, so the multiplier itself is the error
        up_gap = np.where(np.isfinite(hi[ineq]), hi[ineq] - Cx[ineq], 1.0)
        lo_gap = np.where(np.isfinite(lo[ineq]), Cx[ineq] - lo[ineq], 1.0)
        comp_up = np.where(yi > 0, yi * up_gap, 0.0)
        comp_lo = np.where(yi < 0, -yi * lo_gap, 0.0)
        sign = max(np.abs(comp_up).max(initial=0.0), np.abs(comp_lo).max(initial=0.0))
    return float(max(stat, prim, sign))


def _solve_refined(K, rhs, steps=3):
    """LU solve plus iterative refinement with extended-precision residuals.

    The force QPs are nearly singular (tiny force regularisation), so plain
    double refinement stalls at cond(K) * eps; long double residuals recover
    close to full double accuracy while cond(K) * eps < 1.
    """
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)  # singular K handled below
            lu = scipy.linalg.lu_factor(K, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    if not np.all(np.isfinite(lu[0])) or np.min(np.abs(np.diag(lu[0]))) == 0.0:
        return None
    sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
    Kx = K.astype(np.longdouble)
    bx = rhs.astype(np.longdouble)
    for _ in range(steps):
        r = np.asarray(bx - Kx @ sol.astype(np.longdouble), dtype=float)
        if not np.any(r):
            break
        sol = sol + scipy.linalg.lu_solve(lu, r, check_finite=False)
    return sol


def _polish(G, g, C, lo, hi, eq, y, s, max_exchanges=None):
    """Active-set refinement seeded with the dual sign pattern of ``y``.

    Returns ``(z, y, kkt)`` on success, None when the exchanges fail.
    """
    m, n = C.shape
    tol = 1e-9 * max(1.0, np.abs(y).max(initial=0.0))
    state = np.zeros(m, dtype=int)  # +1 upper active, -1 lower active, 0 inactive
    state[(y > tol) & np.isfinite(hi)] = 1
    state[(y < -tol) & np.isfinite(lo)] = -1
    state[eq] = 1
    seen = set()
    max_exchanges = max_exchanges or 3 * m + 10
    scale = 1.0 + max(np.abs(g).max(initial=0.0), np.abs(G).max())
    for _ in range(max_exchanges):
        key = state.tobytes()
        if key in seen:
            return None
        seen.add(key)
        act = np.flatnonzero(state)
        Ca = C[act]
        ba = np.where(state[act] > 0, hi[act], lo[act])
        K = np.zeros((n + len(act), n + len(act)))
        K[:n, :n] = G
        K[:n, n:] = Ca.T
        K[n:, :n] = Ca
        rhs = np.concatenate([-g, ba])
        sol = _solve_refined(K, rhs)
        if sol is None:
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        if not np.all(np.isfinite(sol)):
            return None
        z = sol[:n]
        ya = np.zeros(m)
        ya[act] = sol[n:]
        Cz = C @ z
        viol_up = Cz - hi
        viol_lo = lo - Cz
        viol = np.maximum(viol_up, viol_lo)
        viol[state != 0] = -np.inf
        dual_bad = np.where(eq, 0.0, np.where(state > 0, -ya, np.where(state < 0, ya, 0.0)))
        worst_viol = int(np.argmax(viol)) if m else 0
        worst_dual = int(np.argmax(dual_bad)) if m else 0
        feas_tol = 1e-10 * (1.0 + np.abs(Cz).max(initial=0.0))
        if m and viol[worst_viol] > feas_tol:
            state[worst_viol] = 1 if viol_up[worst_viol] > viol_lo[worst_viol] else -1
            continue
        if m and dual_bad[worst_dual] > 1e-10 * scale:
            state[worst_dual] = 0
            continue
        kkt = _kkt_residual(G, g, C, lo, hi, eq, z, ya)
        if kkt > s.kkt_tol * scale:
            return None
        return z, ya, kkt
    return None
