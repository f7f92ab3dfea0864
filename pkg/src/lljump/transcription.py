"""Multiple-shooting transcription of a phase-structured jump into an NLP.

Decision vector layout
----------------------
Knots ``k = 0..N``; segment ``k`` joins knot ``k`` to ``k+1`` and belongs to
the phase that owns it. Knot ``N`` belongs to the last phase. Per knot, in
this order::

    x[k]   13  [r, q (xyzw), H, L]
    f[k]   3 * contacts of every in-contact foot (foot-major, corner, xyz);
           absent for feet not in contact (eliminated, read back as zero)
    p[k]   3 * n_legs foot positions

followed by one ``dt`` per phase (aliased by every segment of that phase).

Residual counts (``nc_k`` = contact forces present at knot k, ``pin_k`` =
pinned feet at knot k, ``K = N + 1``)::

    n_vars = K (13 + 3 n_legs) + 3 sum_k nc_k + n_phases
    n_eq   = 13 N + 13 + (9 if orientation in cost else 13) + K + 3 sum_k pin_k
    n_ineq = 2 K n_legs + 4 sum_k nc_k
    n_cost = N (3 n_legs + 3 n_contacts + 1) + 6 K + 8

Costs are all written as sums of squares so the solver can use its
Gauss-Newton inner loop.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import InconsistentSchedule, InfeasibleBounds, LengthMismatch, MissingJacobian
from .model import Control, RobotModel, State, quat_to_rot, rot_to_axis_angle, slerp
from .solver.nlp import NlpProblem, solve_nlp

PHASE_NAMES = ("takeoff", "flight", "post_landing")
STATE_DIM = 13
FD_REL = 1e-6


# ------------------------------------------------------------------ types


@dataclass
class Phase:
    name: str
    segments: int
    contact_flags: Sequence[bool]
    fixed_foot_targets: Optional[Sequence] = None  # per foot: 3-vector or None

    def __post_init__(self):
        if self.name not in PHASE_NAMES:
            raise InconsistentSchedule(f"unknown phase name {self.name!r}")
        self.contact_flags = [bool(c) for c in self.contact_flags]
        if self.fixed_foot_targets is None:
            self.fixed_foot_targets = [None] * len(self.contact_flags)
        self.fixed_foot_targets = [None if t is None else np.asarray(t, dtype=float).reshape(3) for t in self.fixed_foot_targets]


@dataclass
class PhaseSchedule:
    phases: List[Phase]

    @property
    def n_segments(self):
        return sum(ph.segments for ph in self.phases)

    @property
    def n_phases(self):
        return len(self.phases)

    def segment_phase(self):
        return np.repeat(np.arange(self.n_phases), [ph.segments for ph in self.phases])

    def knot_phase(self):
        return np.append(self.segment_phase(), self.n_phases - 1)

    def validate(self, n_legs, N=None):
        if not self.phases:
            raise InconsistentSchedule("schedule has no phases")
        segs = [ph.segments for ph in self.phases]
        if min(segs) < 1:
            raise InconsistentSchedule("every phase needs at least one segment")
        if len(set(segs)) != 1:
            raise InconsistentSchedule(f"phases must share the segment count equally, got {segs}")
        if N is not None and self.n_segments != N:
            raise InconsistentSchedule(f"schedule has {self.n_segments} segments, task expects N={N}")
        for ph in self.phases:
            if len(ph.contact_flags) != n_legs or len(ph.fixed_foot_targets) != n_legs:
                raise InconsistentSchedule(f"phase {ph.name}: need {n_legs} contact flags and targets")
            if ph.name == "flight" and any(ph.contact_flags):
                raise InconsistentSchedule("flight phase must have all contact flags false")
            for c, t in zip(ph.contact_flags, ph.fixed_foot_targets):
                if c and t is None:
                    raise InconsistentSchedule(f"phase {ph.name}: foot in contact without a target")
                if not c and t is not None:
                    raise InconsistentSchedule(f"phase {ph.name}: target given for a foot not in contact")
        return self

    @classmethod
    def standard(cls, task, n_legs):
        """Takeoff / flight / post-landing with N/3 segments each."""
        if task.N % 3:
            raise InconsistentSchedule(f"N={task.N} is not divisible by 3 phases")
        m = task.N // 3
        on, off = [True] * n_legs, [False] * n_legs
        return cls([
            Phase("takeoff", m, on, list(task.p_ini)),
            Phase("flight", m, off, None),
            Phase("post_landing", m, on, list(task.p_fin)),
        ])


@dataclass
class CostWeights:
    w_smooth_force: float = 1e-4
    w_smooth_foot: float = 1e-1
    w_H: float = 1e-3
    w_L: float = 1e-2
    w_time: float = 10.0
    w_qfin: float = 1e3
    w_qdotfin: float = 10.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v >= 0:
                raise ValueError(f"weight {k} must be nonnegative, got {v}")


@dataclass(eq=False)
class JumpTask:
    x_ini: State
    x_fin: State
    p_ini: np.ndarray  # (n_legs, 3) world
    p_fin: np.ndarray
    t_min: float = 0.02
    t_max: float = 0.1
    N: int = 48

    def __post_init__(self):
        self.p_ini = np.asarray(self.p_ini, dtype=float).reshape(-1, 3)
        self.p_fin = np.asarray(self.p_fin, dtype=float).reshape(-1, 3)

    def validate(self, model: RobotModel):
        if not 0 < self.t_min <= self.t_max:
            raise InfeasibleBounds(f"need 0 < t_min <= t_max, got {self.t_min}, {self.t_max}")
        if self.N < 3:
            raise InfeasibleBounds("N must be at least 3")
        for name, x, p in (("initial", self.x_ini, self.p_ini), ("final", self.x_fin, self.p_fin)):
            if p.shape != (model.n_legs, 3):
                raise InconsistentSchedule(f"{name} foot targets need shape ({model.n_legs}, 3)")
            d = np.linalg.norm(x.r - p, axis=1)
            if np.any(d < model.l_min - 1e-9) or np.any(d > model.l_max + 1e-9):
                raise InfeasibleBounds(f"{name} foot targets violate leg length limits: {np.round(d, 4)}")
        return self


@dataclass(eq=False)
class Knot:
    x: State
    u: Control
    dt: float


@dataclass(eq=False)
class Trajectory:
    """Knot sequence with schedule metadata; arrays are indexed by knot."""

    X: np.ndarray  # (K, 13)
    forces: np.ndarray  # (K, n_contacts, 3)
    feet: np.ndarray  # (K, n_legs, 3)
    dt: np.ndarray  # (N,) per segment
    knot_phase: np.ndarray  # (K,)
    contact: np.ndarray  # (K, n_legs) bool
    phase_names: list = field(default_factory=lambda: list(PHASE_NAMES))
    meta: dict = field(default_factory=dict)

    @property
    def n_knots(self):
        return len(self.X)

    @property
    def t(self):
        return np.concatenate([[0.0], np.cumsum(self.dt)])

    @property
    def duration(self):
        return float(np.sum(self.dt))

    def state(self, k):
        return State.from_vector(self.X[k])

    def knots(self):
        dts = np.append(self.dt, self.dt[-1])
        return [Knot(self.state(k), Control(self.forces[k], self.feet[k]), float(dts[k])) for k in range(self.n_knots)]

    def phase_interval(self, name):
        """(t_start, t_end) of the named phase."""
        j = self.phase_names.index(name)
        ks = np.flatnonzero(self.knot_phase[:-1] == j)
        t = self.t
        return float(t[ks[0]]), float(t[ks[-1] + 1])

    def flight_knots(self):
        return np.flatnonzero(~self.contact.any(axis=1))

    def sample(self, time):
        """Zero-order-hold controls and linearly interpolated states at ``time``."""
        t = self.t
        k = int(np.clip(np.searchsorted(t, time, side="right") - 1, 0, self.n_knots - 2))
        s = float(np.clip((time - t[k]) / max(t[k + 1] - t[k], 1e-12), 0.0, 1.0))
        x = (1 - s) * self.X[k] + s * self.X[k + 1]
        x[3:7] = slerp(self.X[k, 3:7], self.X[k + 1, 3:7], s)
        feet = (1 - s) * self.feet[k] + s * self.feet[k + 1]
        return State.from_vector(x), self.forces[k], feet, k

    def equals(self, other, atol=0.0):
        return (
            all(np.allclose(a, b, rtol=0, atol=atol) for a, b in ((self.X, other.X), (self.forces, other.forces), (self.feet, other.feet), (self.dt, other.dt)))
            and np.array_equal(self.knot_phase, other.knot_phase)
            and np.array_equal(self.contact, other.contact)
        )


# ------------------------------------------------------------ small pieces


def friction_pyramid_matrix(mu):
    """4x3 matrix P with P f <= 0 encoding |f_x| <= mu f_z and |f_y| <= mu f_z."""
    if not mu > 0:
        raise ValueError("friction coefficient must be positive")
    return np.array([
        [1.0, 0.0, -mu],
        [-1.0, 0.0, -mu],
        [0.0, 1.0, -mu],
        [0.0, -1.0, -mu],
    ])


def grf_limit_from_torques(J=None, tau_max=None, f_max_z=None):
    """Ground reaction force limit from joint torque limits at the default pose.

    Returns the 3-vector ``J' tau_max``; an explicit ``f_max_z`` overrides the
    z component. Raises MissingJacobian when neither source is available.
    """
    if J is None or tau_max is None:
        if f_max_z is None:
            raise MissingJacobian("need a default-configuration Jacobian with torque limits, or an explicit f_max_z")
        return np.array([np.inf, np.inf, float(f_max_z)])
    f = np.asarray(J, dtype=float).T @ np.asarray(tau_max, dtype=float)
    if f_max_z is not None:
        f = f.copy()
        f[2] = float(f_max_z)
    return f


def _signed_target(q, q_target):
    return q_target if np.dot(q, q_target) >= 0 else -q_target


def _qdot(X, feet, params):
    """Quaternion rate at each row of ``X`` using the momentum and foot positions."""
    f = np.zeros((len(X), params.n_contacts, 3))
    return kernels.dynamics_batch(X, f, feet, params)[:, 3:7]


def cost_smoothness(traj: Trajectory, weights: CostWeights):
    if traj.n_knots < 2:
        raise ValueError("need at least two knots")
    dt = traj.dt[:, None, None]
    dp = (traj.feet[1:] - traj.feet[:-1]) / dt
    df = (traj.forces[1:] - traj.forces[:-1]) / dt
    return float(weights.w_smooth_foot * np.sum(dp ** 2) + weights.w_smooth_force * np.sum(df ** 2))


def cost_energy(traj: Trajectory, weights: CostWeights):
    return float(weights.w_H * np.sum(traj.X[:, 7:10] ** 2) + weights.w_L * np.sum(traj.X[:, 10:13] ** 2))


def cost_time(traj: Trajectory, weights: CostWeights):
    return float(weights.w_time * np.sum(traj.dt ** 2))


def cost_final_orientation(traj: Trajectory, task: JumpTask, weights: CostWeights, model: RobotModel):
    xN = traj.X[-1]
    qf = _signed_target(xN[3:7], task.x_fin.q)
    qd = _qdot(xN[None], traj.feet[-1][None], model.params)[0]
    qd_fin = _qdot(task.x_fin.as_vector()[None], task.p_fin[None], model.params)[0]
    return float(weights.w_qfin * np.sum((xN[3:7] - qf) ** 2) + weights.w_qdotfin * np.sum((qd - qd_fin) ** 2))


def total_cost(traj, task, weights, model):
    return cost_smoothness(traj, weights) + cost_energy(traj, weights) + cost_time(traj, weights) + cost_final_orientation(traj, task, weights, model)


# ----------------------------------------------------------------- layout


@dataclass(eq=False)
class Layout:
    ix_x: np.ndarray  # (K, 13)
    ix_f: np.ndarray  # (K, n_contacts, 3), -1 where eliminated
    ix_p: np.ndarray  # (K, n_legs, 3)
    ix_dt: np.ndarray  # (n_phases,)
    seg_phase: np.ndarray
    knot_phase: np.ndarray
    contact: np.ndarray  # (K, n_legs)
    n: int

    @property
    def K(self):
        return len(self.ix_x)

    def unpack(self, z):
        X = z[self.ix_x]
        F = np.where(self.ix_f >= 0, z[np.maximum(self.ix_f, 0)], 0.0)
        P = z[self.ix_p]
        dt_phase = z[self.ix_dt]
        return X, F, P, dt_phase[self.seg_phase]

    def pack(self, X, F, P, dt_phase):
        z = np.zeros(self.n)
        z[self.ix_x] = X
        m = self.ix_f >= 0
        z[self.ix_f[m]] = F[m]
        z[self.ix_p] = P
        z[self.ix_dt] = dt_phase
        return z

    def per_knot_counts(self):
        return 13 + (self.ix_f >= 0).reshape(self.K, -1).sum(axis=1) + self.ix_p[0].size


def make_layout(schedule: PhaseSchedule, model: RobotModel, eliminate_flight_forces=True):
    N = schedule.n_segments
    K = N + 1
    nl, cpf = model.n_legs, model.contacts_per_foot
    knot_phase = schedule.knot_phase()
    contact = np.array([schedule.phases[j].contact_flags for j in knot_phase], dtype=bool)
    ix_x = np.zeros((K, 13), dtype=np.int64)
    ix_f = -np.ones((K, nl * cpf, 3), dtype=np.int64)
    ix_p = np.zeros((K, nl, 3), dtype=np.int64)
    pos = 0
    for k in range(K):
        ix_x[k] = np.arange(pos, pos + 13)
        pos += 13
        for i in range(nl):
            if contact[k, i] or not eliminate_flight_forces:
                for c in range(cpf):
                    ix_f[k, i * cpf + c] = np.arange(pos, pos + 3)
                    pos += 3
        ix_p[k] = np.arange(pos, pos + 3 * nl).reshape(nl, 3)
        pos += 3 * nl
    ix_dt = np.arange(pos, pos + schedule.n_phases)
    pos += schedule.n_phases
    return Layout(ix_x, ix_f, ix_p, ix_dt, schedule.segment_phase(), knot_phase, contact, pos)


def expected_counts(schedule: PhaseSchedule, model: RobotModel, orientation_in_cost: bool):
    """Closed-form sizes of the NLP built for ``schedule`` (see module docstring)."""
    N = schedule.n_segments
    K = N + 1
    kp = schedule.knot_phase()
    nl, cpf = model.n_legs, model.contacts_per_foot
    feet_on = np.array([sum(schedule.phases[j].contact_flags) for j in kp])
    nc = feet_on * cpf
    return {
        "n_vars": K * (13 + 3 * nl) + 3 * int(nc.sum()) + schedule.n_phases,
        "n_eq": 13 * N + 13 + (9 if orientation_in_cost else 13) + K + 3 * int(feet_on.sum()),
        "n_ineq": 2 * K * nl + 4 * int(nc.sum()),
        "n_cost": N * (3 * nl + 3 * nl * cpf + 1) + 6 * K + 8,
    }


# -------------------------------------------------------------- the build


def initial_guess(task: JumpTask, schedule: PhaseSchedule, model: RobotModel, layout: Layout):
    """Interpolated states, weight-sharing stance forces, mid-range dt."""
    K = layout.K
    s = np.linspace(0.0, 1.0, K)
    xi, xf = task.x_ini.as_vector(), task.x_fin.as_vector()
    X = (1 - s)[:, None] * xi + s[:, None] * xf
    X[:, 3:7] = np.array([slerp(task.x_ini.q, task.x_fin.q, si) for si in s])
    P = np.empty((K, model.n_legs, 3))
    for k in range(K):
        ph = schedule.phases[layout.knot_phase[k]]
        free = (1 - s[k]) * task.p_ini + s[k] * task.p_fin
        for i in range(model.n_legs):
            P[k, i] = ph.fixed_foot_targets[i] if ph.contact_flags[i] else free[i]
    F = np.zeros(layout.ix_f.shape)
    weight = -model.total_mass * model.gravity[2]
    force_on = np.repeat(layout.contact, model.contacts_per_foot, axis=1)
    for k in range(K):
        active = force_on[k]
        if active.any():
            F[k, active, 2] = weight / active.sum()
    dt = np.full(schedule.n_phases, 0.5 * (task.t_min + task.t_max))
    return layout.pack(X, F, P, dt)


def build_nlp(task: JumpTask, schedule: PhaseSchedule, weights: CostWeights, model: RobotModel,
              final_orientation_in_cost: Optional[bool] = None, ground_height: Optional[float] = None,
              eliminate_flight_forces: bool = True):
    """Assemble the multiple-shooting NLP.

    ``final_orientation_in_cost=None`` relaxes the terminal orientation rows
    into the cost whenever the task changes orientation (twist tasks).
    With ``eliminate_flight_forces=False`` the forces of airborne feet stay
    in the decision vector and are pinned to zero by equality rows instead
    (only useful for checking that the elimination changes nothing).
    """
    task.validate(model)
    schedule.validate(model.n_legs, task.N)
    if final_orientation_in_cost is None:
        angle = rot_to_axis_angle(quat_to_rot(task.x_fin.q) @ quat_to_rot(task.x_ini.q).T)[1]
        final_orientation_in_cost = angle > 1e-6
    lay = make_layout(schedule, model, eliminate_flight_forces)
    params = model.params
    N, K = task.N, lay.K
    nl, nc = model.n_legs, model.n_contacts
    x_ini, x_fin = task.x_ini.as_vector(), task.x_fin.as_vector()
    fin_rows = np.array([0, 1, 2, 7, 8, 9, 10, 11, 12] if final_orientation_in_cost else list(range(13)))
    Pm = friction_pyramid_matrix(model.mu)
    qd_fin = _qdot(x_fin[None], task.p_fin[None], params)[0]
    q_fin = task.x_fin.q.copy()
    sw = {k: np.sqrt(v) for k, v in vars(weights).items()}

    # pinned feet and active forces, flattened
    pin_k, pin_i = np.nonzero(lay.contact)
    pin_target = np.array([schedule.phases[lay.knot_phase[k]].fixed_foot_targets[i] for k, i in zip(pin_k, pin_i)]).reshape(-1, 3)
    force_on = np.repeat(lay.contact, model.contacts_per_foot, axis=1)  # (K, n_contacts)
    act_k, act_c = np.nonzero(force_on)
    off_k, off_c = np.nonzero((lay.ix_f[:, :, 0] >= 0) & ~force_on)

    # --- bounds
    lb = np.full(lay.n, -np.inf)
    ub = np.full(lay.n, np.inf)
    lb[lay.ix_dt] = task.t_min
    ub[lay.ix_dt] = task.t_max
    fz = lay.ix_f[act_k, act_c, 2]
    lb[fz] = 0.0
    ub[fz] = model.f_max_z
    if ground_height is None:
        ground_height = float(min(task.p_ini[:, 2].min(), task.p_fin[:, 2].min()))
    lb[lay.ix_p[:, :, 2].ravel()] = ground_height

    # --- equalities
    def eq(z):
        X, F, P, dts = lay.unpack(z)
        Xn = kernels.rk4_batch(X[:-1], F[:-1], P[:-1], dts, params)
        return np.concatenate([
            (X[1:] - Xn).ravel(),
            X[0] - x_ini,
            (X[-1] - x_fin)[fin_rows],
            np.einsum("ki,ki->k", X[:, 3:7], X[:, 3:7]) - 1.0,
            (P[pin_k, pin_i] - pin_target).ravel(),
            F[off_k, off_c].ravel(),
        ])

    nv_seg = 13 + 3 * nc + 3 * nl + 1

    def defect_blocks(z):
        """-d rk4 / d(x, f, p, dt) per segment via one batched central difference."""
        X, F, P, dts = lay.unpack(z)
        v = np.concatenate([X[:-1], F[:-1].reshape(N, -1), P[:-1].reshape(N, -1), dts[:, None]], axis=1)
        h = FD_REL * np.maximum(1.0, np.abs(v))
        V = np.repeat(v[:, None, :], 2 * nv_seg, axis=1)  # (N, 2nv, nv)
        idx = np.arange(nv_seg)
        V[:, idx, idx] += h
        V[:, nv_seg + idx, idx] -= h
        V = V.reshape(-1, nv_seg)
        out = kernels.rk4_batch(
            V[:, :13],
            V[:, 13:13 + 3 * nc].reshape(-1, nc, 3),
            V[:, 13 + 3 * nc:13 + 3 * nc + 3 * nl].reshape(-1, nl, 3),
            V[:, -1],
            params,
        ).reshape(N, 2 * nv_seg, 13)
        D = (out[:, :nv_seg] - out[:, nv_seg:]) / (2 * h[:, :, None])  # (N, nv, 13)
        return -np.transpose(D, (0, 2, 1))  # (N, 13, nv)

    # column index of each segment input (or -1 when eliminated)
    seg_cols = np.concatenate([
        lay.ix_x[:-1],
        lay.ix_f[:-1].reshape(N, -1),
        lay.ix_p[:-1].reshape(N, -1),
        lay.ix_dt[lay.seg_phase][:, None],
    ], axis=1)
    n_def = 13 * N
    row0_init = n_def
    row0_fin = row0_init + 13
    row0_qn = row0_fin + len(fin_rows)
    row0_pin = row0_qn + K
    row0_off = row0_pin + 3 * len(pin_k)
    n_eq = row0_off + 3 * len(off_k)

    # constant parts of the equality jacobian
    r_const, c_const, v_const = [], [], []
    r_const.append(np.arange(n_def)); c_const.append(lay.ix_x[1:].ravel()); v_const.append(np.ones(n_def))
    r_const.append(row0_init + np.arange(13)); c_const.append(lay.ix_x[0]); v_const.append(np.ones(13))
    r_const.append(row0_fin + np.arange(len(fin_rows))); c_const.append(lay.ix_x[-1][fin_rows]); v_const.append(np.ones(len(fin_rows)))
    r_const.append(row0_pin + np.arange(3 * len(pin_k))); c_const.append(lay.ix_p[pin_k, pin_i].ravel()); v_const.append(np.ones(3 * len(pin_k)))
    r_const.append(row0_off + np.arange(3 * len(off_k))); c_const.append(lay.ix_f[off_k, off_c].ravel()); v_const.append(np.ones(3 * len(off_k)))
    r_const, c_const, v_const = map(np.concatenate, (r_const, c_const, v_const))
    keep = seg_cols >= 0  # (N, nv)
    def_rows = np.broadcast_to((np.arange(N)[:, None, None] * 13 + np.arange(13)[None, :, None]), (N, 13, nv_seg))
    def_cols = np.broadcast_to(seg_cols[:, None, :], (N, 13, nv_seg))
    keep3 = np.broadcast_to(keep[:, None, :], (N, 13, nv_seg))
    def_rows, def_cols = def_rows[keep3], def_cols[keep3]

    def eq_jac(z):
        D = defect_blocks(z)
        X = z[lay.ix_x]
        rows = [r_const, def_rows, np.repeat(row0_qn + np.arange(K), 4)]
        cols = [c_const, def_cols, lay.ix_x[:, 3:7].ravel()]
        vals = [v_const, D[keep3], 2.0 * X[:, 3:7].ravel()]
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_eq, lay.n))

    # --- inequalities
    n_leg_rows = 2 * K * nl
    n_ineq = n_leg_rows + 4 * len(act_k)

    def ineq(z):
        X, F, P, _ = lay.unpack(z)
        d = np.linalg.norm(X[:, None, 0:3] - P, axis=2).ravel()
        fr = F[act_k, act_c] @ Pm.T
        return np.concatenate([model.l_min - d, d - model.l_max, fr.ravel()])

    leg_k = np.repeat(np.arange(K), nl)
    leg_i = np.tile(np.arange(nl), K)
    fr_rows = n_leg_rows + np.repeat(np.arange(4 * len(act_k)), 3)
    fr_cols = np.repeat(lay.ix_f[act_k, act_c][:, None, :], 4, axis=1).ravel()
    fr_vals = np.tile(Pm.ravel(), len(act_k))

    def ineq_jac(z):
        X, F, P, _ = lay.unpack(z)
        diff = (X[:, None, 0:3] - P).reshape(-1, 3)
        u = diff / np.maximum(np.linalg.norm(diff, axis=1), 1e-12)[:, None]
        rows, cols, vals = [], [], []
        for sgn, off in ((-1.0, 0), (1.0, K * nl)):
            rr = np.repeat(off + np.arange(K * nl), 3)
            rows += [rr, rr]
            cols += [lay.ix_x[leg_k, 0:3].ravel(), lay.ix_p[leg_k, leg_i].ravel()]
            vals += [sgn * u.ravel(), -sgn * u.ravel()]
        rows.append(fr_rows); cols.append(fr_cols); vals.append(fr_vals)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_ineq, lay.n))

    # --- least-squares cost
    def residuals(z):
        X, F, P, dts = lay.unpack(z)
        inv = 1.0 / dts
        rp = sw["w_smooth_foot"] * (P[1:] - P[:-1]).reshape(N, -1) * inv[:, None]
        rf = sw["w_smooth_force"] * (F[1:] - F[:-1]).reshape(N, -1) * inv[:, None]
        qN = X[-1, 3:7]
        rq = sw["w_qfin"] * (qN - _signed_target(qN, q_fin))
        rqd = sw["w_qdotfin"] * (_qdot(X[-1][None], P[-1][None], params)[0] - qd_fin)
        return np.concatenate([
            rp.ravel(), rf.ravel(),
            sw["w_H"] * X[:, 7:10].ravel(), sw["w_L"] * X[:, 10:13].ravel(),
            sw["w_time"] * dts, rq, rqd,
        ])

    n_rp, n_rf = N * 3 * nl, N * 3 * nc
    o_H = n_rp + n_rf
    o_L = o_H + 3 * K
    o_t = o_L + 3 * K
    o_q = o_t + N
    o_qd = o_q + 4
    n_res = o_qd + 4
    seg_dt_col = lay.ix_dt[lay.seg_phase]
    f_cols_k = lay.ix_f.reshape(K, -1)

    def residuals_jac(z):
        X, F, P, dts = lay.unpack(z)
        inv = 1.0 / dts
        rows, cols, vals = [], [], []
        # foot smoothness
        a = sw["w_smooth_foot"]
        rr = np.arange(n_rp).reshape(N, -1)
        dP = (P[1:] - P[:-1]).reshape(N, -1)
        pc = lay.ix_p.reshape(K, -1)
        rows += [rr.ravel(), rr.ravel(), rr.ravel()]
        cols += [pc[1:].ravel(), pc[:-1].ravel(), np.repeat(seg_dt_col, 3 * nl)]
        vals += [np.repeat(a * inv, 3 * nl), np.repeat(-a * inv, 3 * nl), (-a * dP * inv[:, None] ** 2).ravel()]
        # force smoothness; eliminated forces contribute no columns
        b = sw["w_smooth_force"]
        if n_rf:
            rr = n_rp + np.arange(n_rf).reshape(N, -1)
            dF = (F[1:] - F[:-1]).reshape(N, -1)
            for cols_k, sgn in ((f_cols_k[1:], 1.0), (f_cols_k[:-1], -1.0)):
                m = cols_k >= 0
                rows.append(rr[m]); cols.append(cols_k[m]); vals.append((sgn * b * np.broadcast_to(inv[:, None], m.shape))[m])
            rows.append(rr.ravel()); cols.append(np.repeat(seg_dt_col, 3 * nc)); vals.append((-b * dF * inv[:, None] ** 2).ravel())
        # momenta and time
        rows += [o_H + np.arange(3 * K), o_L + np.arange(3 * K), o_t + np.arange(N)]
        cols += [lay.ix_x[:, 7:10].ravel(), lay.ix_x[:, 10:13].ravel(), seg_dt_col]
        vals += [np.full(3 * K, sw["w_H"]), np.full(3 * K, sw["w_L"]), np.full(N, sw["w_time"])]
        # terminal quaternion
        rows.append(o_q + np.arange(4)); cols.append(lay.ix_x[-1, 3:7]); vals.append(np.full(4, sw["w_qfin"]))
        # terminal quaternion rate: small dense central difference over (x_N, p_N)
        if sw["w_qdotfin"] > 0:
            xN, pN = X[-1], P[-1]
            v = np.concatenate([xN, pN.ravel()])
            nvq = len(v)
            h = FD_REL * np.maximum(1.0, np.abs(v))
            V = np.repeat(v[None], 2 * nvq, axis=0)
            V[np.arange(nvq), np.arange(nvq)] += h
            V[nvq + np.arange(nvq), np.arange(nvq)] -= h
            qd = _qdot(V[:, :13], V[:, 13:].reshape(-1, nl, 3), params)
            Dq = ((qd[:nvq] - qd[nvq:]) / (2 * h[:, None])).T * sw["w_qdotfin"]  # (4, nvq)
            cN = np.concatenate([lay.ix_x[-1], lay.ix_p[-1].ravel()])
            rows.append(np.repeat(o_qd + np.arange(4), nvq)); cols.append(np.tile(cN, 4)); vals.append(Dq.ravel())
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_res, lay.n))

    meta = {
        "task": task,
        "schedule": schedule,
        "weights": weights,
        "model": model,
        "layout": lay,
        "final_orientation_in_cost": bool(final_orientation_in_cost),
        "counts": {"n_vars": lay.n, "n_eq": n_eq, "n_ineq": n_ineq, "n_cost": n_res},
        "ground_height": ground_height,
    }
    index_map = {"x": lay.ix_x, "f": lay.ix_f, "p": lay.ix_p, "dt": lay.ix_dt}
    prob = NlpProblem(
        n=lay.n, lb=lb, ub=ub,
        residuals=residuals, residuals_jac=residuals_jac,
        eq=eq, eq_jac=eq_jac,
        ineq=ineq, ineq_jac=ineq_jac,
        index_map=index_map, meta=meta,
    )
    meta["z0"] = initial_guess(task, schedule, model, lay)
    return prob


def extract_trajectory(z, problem: NlpProblem) -> Trajectory:
    lay = problem.meta["layout"]
    z = np.asarray(z, dtype=float)
    if z.shape != (lay.n,):
        raise LengthMismatch(f"decision vector has length {z.size}, layout expects {lay.n}")
    X, F, P, dts = lay.unpack(z)
    sched = problem.meta["schedule"]
    return Trajectory(
        X=X.copy(), forces=F, feet=P.copy(), dt=dts.copy(),
        knot_phase=lay.knot_phase.copy(), contact=lay.contact.copy(),
        phase_names=[ph.name for ph in sched.phases],
        meta={"model": problem.meta["model"].name},
    )


def pack_trajectory(traj: Trajectory, problem: NlpProblem):
    """Inverse of :func:`extract_trajectory` (dt taken from each phase's first segment)."""
    lay = problem.meta["layout"]
    if traj.X.shape[0] != lay.K:
        raise LengthMismatch(f"trajectory has {traj.X.shape[0]} knots, layout expects {lay.K}")
    first = np.array([np.flatnonzero(lay.seg_phase == j)[0] for j in range(len(lay.ix_dt))])
    return lay.pack(traj.X, traj.forces, traj.feet, traj.dt[first])


def resimulate(traj: Trajectory, model: RobotModel, x0=None):
    """Chain RK4 from the first knot under the planned controls (held per segment).

    Returns the (K, 13) simulated knot states; with zero defects this equals
    ``traj.X`` up to round-off.
    """
    params = model.params
    X = np.empty_like(traj.X)
    X[0] = traj.X[0] if x0 is None else np.asarray(x0, dtype=float)
    for k in range(traj.n_knots - 1):
        X[k + 1] = kernels.rk4_batch(X[k][None], traj.forces[k][None], traj.feet[k][None], np.array([traj.dt[k]]), params)[0]
    return X


def plan_jump(task: JumpTask, schedule: PhaseSchedule, weights: CostWeights, model: RobotModel, solver_cfg=None,
              **build_kw):
    """Transcribe, solve and extract; returns ``(Trajectory, SolveReport)``.

    The report is also stored in ``traj.meta["solve_report"]``.
    """
    problem = build_nlp(task, schedule, weights, model, **build_kw)
    z, report = solve_nlp(problem, problem.meta["z0"], solver_cfg)
    traj = extract_trajectory(z, problem)
    traj.meta["solve_report"] = report
    return traj, report
