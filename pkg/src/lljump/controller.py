"""Centroidal tracking controller: PD task commands and a contact-force QP.

Each tick turns the planned CoM and orientation references into a desired
CoM acceleration and angular momentum rate, then distributes them over the
active contacts with a weighted-sum QP under friction and normal-force limits.
After touchdown the momentum terms are switched off for a short window and the
QP tracks the planned landing forces instead (soft landing).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from .errors import NoActiveContacts, QpInfeasible
from .model import RobotModel, State, centroidal_inertia, contact_points, quat_to_rot, rot_to_axis_angle
from .solver.qp import QpProblem, solve_qp
from .solver.report import Status
from .transcription import Trajectory, friction_pyramid_matrix

log = logging.getLogger(__name__)

DEFAULT_RATES = {"point": 400.0, "planar": 1000.0}


def _diag(v):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = np.full(3, float(v))
    if v.ndim == 2:
        v = np.diag(v)
    return v.reshape(3)


def _psd(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim < 2:
        M = np.diag(_diag(M))
    if not np.allclose(M, M.T, atol=1e-12) or np.linalg.eigvalsh(0.5 * (M + M.T)).min() < -1e-12:
        raise ValueError(f"{name} must be symmetric positive semidefinite")
    return 0.5 * (M + M.T)


@dataclass
class TaskGains:
    """Diagonal PD gains; scalars and 3x3 diagonal matrices are accepted."""

    K_P_pos: np.ndarray = 100.0
    K_D_pos: np.ndarray = 20.0
    K_P_ang: np.ndarray = 100.0
    K_D_ang: np.ndarray = 20.0

    def __post_init__(self):
        for name in ("K_P_pos", "K_D_pos", "K_P_ang", "K_D_ang"):
            v = _diag(getattr(self, name))
            if np.any(v < 0):
                raise ValueError(f"{name} entries must be >= 0")
            setattr(self, name, v)


@dataclass
class ControllerWeights:
    W_lin: np.ndarray = 1.0
    W_ang: np.ndarray = 1.0
    W_2: np.ndarray = 0.0
    w_reg: float = 1e-8

    def __post_init__(self):
        self.W_lin = _psd(self.W_lin, "W_lin")
        self.W_ang = _psd(self.W_ang, "W_ang")
        self.W_2 = _psd(self.W_2, "W_2")
        if not self.w_reg > 0:
            raise ValueError("w_reg must be positive")

    def landing(self, w_force=1.0):
        """Soft-landing weights: momentum terms off, force tracking on."""
        return ControllerWeights(np.zeros((3, 3)), np.zeros((3, 3)), w_force * np.eye(3), self.w_reg)


class Mode(str, Enum):
    TRAJECTORY_TRACKING = "TrajectoryTracking"
    FORCE_TRACKING = "ForceTracking"


@dataclass(frozen=True)
class ControllerMode:
    mode: Mode = Mode.TRAJECTORY_TRACKING
    force_phase_duration: float = 0.2
    entered_at: float = 0.0

    def __post_init__(self):
        if self.force_phase_duration < 0:
            raise ValueError("force_phase_duration must be >= 0")

    def timer(self, clock):
        return float(clock - self.entered_at)


def update_mode(mode: ControllerMode, contact_event: bool, clock: float) -> ControllerMode:
    """Advance the landing mode machine by one tick (at most one transition)."""
    if mode.mode == Mode.TRAJECTORY_TRACKING:
        if contact_event:
            return replace(mode, mode=Mode.FORCE_TRACKING, entered_at=float(clock))
        return mode
    # a second contact event while already landing does not restart the timer
    if mode.timer(clock) >= mode.force_phase_duration - 1e-12:
        return replace(mode, mode=Mode.TRAJECTORY_TRACKING, entered_at=float(clock))
    return mode


# ------------------------------------------------------------ command laws


def linear_command(x_des, xd_des, xdd_des, x, xd, gains: TaskGains):
    return (np.asarray(xdd_des, dtype=float)
            + gains.K_P_pos * (np.asarray(x_des, dtype=float) - x)
            + gains.K_D_pos * (np.asarray(xd_des, dtype=float) - xd))


def angular_command(R_des, R, w_des, w, wd_des, gains: TaskGains):
    err = rot_to_axis_angle(np.asarray(R_des, dtype=float) @ np.asarray(R, dtype=float).T)
    return (np.asarray(wd_des, dtype=float)
            + gains.K_P_ang * err
            + gains.K_D_ang * (np.asarray(w_des, dtype=float) - w))


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


# ------------------------------------------------------------ force QP


def clip_to_pyramid(forces, mu, f_max_z):
    """Cheap fallback: clamp f_z into [0, f_max_z] and each tangential axis into the pyramid."""
    f = np.array(forces, dtype=float).reshape(-1, 3)
    f[:, 2] = np.clip(f[:, 2], 0.0, f_max_z)
    lim = mu * f[:, 2]
    f[:, 0] = np.clip(f[:, 0], -lim, lim)
    f[:, 1] = np.clip(f[:, 1], -lim, lim)
    return f


def force_qp(state: State, acc_cmd, Ldot_cmd, contacts, f_des, weights: ControllerWeights, model: RobotModel):
    """Build the contact-force QP (variables stacked per contact)."""
    contacts = np.asarray(contacts, dtype=float).reshape(-1, 3)
    nc = len(contacts)
    if nc == 0:
        raise NoActiveContacts("force QP needs at least one active contact")
    n = 3 * nc
    m = model.total_mass
    A_lin = np.tile(np.eye(3), (1, nc))
    b_lin = m * (np.asarray(acc_cmd, dtype=float) - model.gravity)
    A_ang = np.hstack([skew(p - state.r) for p in contacts])
    b_ang = np.asarray(Ldot_cmd, dtype=float)
    W2 = np.kron(np.eye(nc), weights.W_2)
    fd = np.zeros(n) if f_des is None else np.asarray(f_des, dtype=float).reshape(n)
    G = 2.0 * (A_lin.T @ weights.W_lin @ A_lin + A_ang.T @ weights.W_ang @ A_ang + W2 + weights.w_reg * np.eye(n))
    g = -2.0 * (A_lin.T @ weights.W_lin @ b_lin + A_ang.T @ weights.W_ang @ b_ang + W2 @ fd)
    P = friction_pyramid_matrix(model.mu)
    lb = np.tile([-np.inf, -np.inf, 0.0], nc)
    ub = np.tile([np.inf, np.inf, model.f_max_z], nc)
    return QpProblem(0.5 * (G + G.T), g, A_in=np.kron(np.eye(nc), P), b_in=np.zeros(4 * nc), lb=lb, ub=ub)


def solve_force_qp(state: State, acc_cmd, Ldot_cmd, contacts, f_des, weights: ControllerWeights, model: RobotModel,
                   warm_start=None, warm_dual=None):
    """Returns ``(forces (nc, 3), SolveReport)``; raises QpInfeasible when the QP fails."""
    qp = force_qp(state, acc_cmd, Ldot_cmd, contacts, f_des, weights, model)
    if warm_start is not None and np.size(warm_start) != qp.n:
        warm_start = warm_dual = None
    z, rep = solve_qp(qp, warm_start=warm_start, warm_dual=warm_dual)
    if rep.status != Status.CONVERGED:
        raise QpInfeasible(f"force QP ended with {rep.status.value}")
    return z.reshape(-1, 3), rep


# ------------------------------------------------------------ plan references


@dataclass
class Reference:
    r: np.ndarray
    v: np.ndarray
    acc: np.ndarray
    R: np.ndarray
    w: np.ndarray
    Ldot: np.ndarray
    forces: np.ndarray
    feet: np.ndarray


def plan_reference(plan: Trajectory, model: RobotModel, t) -> Reference:
    """Reference at plan time ``t``; past the end the final knot is held at rest."""
    m = model.total_mass
    if t >= plan.duration:
        x = plan.state(plan.n_knots - 1)
        forces = plan.forces[-1]
        feet = plan.feet[-1]
        v = np.zeros(3)
        L = np.zeros(3)
    else:
        x, forces, feet, _ = plan.sample(max(t, 0.0))
        v = x.H / m
        L = x.L
    pts = contact_points(x.q, feet, model)
    fsum = forces.sum(axis=0)
    acc = fsum / m + model.gravity
    Ldot = np.cross(pts - x.r, forces).sum(axis=0)
    if t >= plan.duration:
        # holding still: no feedforward beyond gravity compensation
        acc = np.zeros(3)
        Ldot = np.zeros(3)
    IW = centroidal_inertia(x.q, x.r, feet, model)
    return Reference(x.r.copy(), v, acc, quat_to_rot(x.q), np.linalg.solve(IW, L), Ldot, np.array(forces), np.array(feet))


@dataclass
class TickOutput:
    forces: np.ndarray
    mode: Mode
    acc_cmd: np.ndarray
    Ldot_cmd: np.ndarray
    qp_status: str
    qp_iterations: int = 0


@dataclass
class CentroidalController:
    """Stateful per-run controller (one instance per simulation)."""

    plan: Trajectory
    model: RobotModel
    gains: TaskGains = field(default_factory=TaskGains)
    weights: ControllerWeights = field(default_factory=ControllerWeights)
    landing_force_weight: float = 1.0
    force_phase_duration: float = 0.2
    force_ramp: float = 0.05
    rate: Optional[float] = None

    def __post_init__(self):
        if self.rate is None:
            self.rate = DEFAULT_RATES[self.model.foot_type]
        if self.rate <= 0:
            raise ValueError("control rate must be positive")
        self.mode = ControllerMode(force_phase_duration=self.force_phase_duration)
        self._landing_weights = self.weights.landing(self.landing_force_weight)
        self._warm = None
        self._warm_dual = None
        post = np.flatnonzero(plan_phase_knots(self.plan, "post_landing"))
        self._landing_forces = self.plan.forces[post[0]] if len(post) else self.plan.forces[-1]

    @property
    def period(self):
        return 1.0 / self.rate

    def update_mode(self, contact_event, clock):
        self.mode = update_mode(self.mode, contact_event, clock)
        return self.mode

    def tick(self, t_plan, state: State, feet, landing_elapsed=None) -> TickOutput:
        """Forces for the active contacts at the current (observed) state.

        ``t_plan`` is the plan time to track and ``landing_elapsed`` the time
        since touchdown (drives the force ramp in ForceTracking).
        """
        model = self.model
        ref = plan_reference(self.plan, model, t_plan)
        v = state.H / model.total_mass
        IW = centroidal_inertia(state.q, state.r, feet, model)
        w = np.linalg.solve(IW, state.L)
        R = quat_to_rot(state.q)
        acc_cmd = linear_command(ref.r, ref.v, ref.acc, state.r, v, self.gains)
        wd_cmd = angular_command(ref.R, R, ref.w, w, np.linalg.solve(IW, ref.Ldot), self.gains)
        Ldot_cmd = IW @ wd_cmd
        pts = contact_points(state.q, feet, model)
        if self.mode.mode == Mode.FORCE_TRACKING:
            s = 1.0 if not self.force_ramp else float(np.clip((landing_elapsed or 0.0) / self.force_ramp, 0.0, 1.0))
            f_des = s * self._landing_forces
            weights = self._landing_weights
        else:
            f_des = ref.forces
            weights = self.weights
        try:
            f, rep = solve_force_qp(state, acc_cmd, Ldot_cmd, pts, f_des, weights, model, self._warm, self._warm_dual)
            self._warm, self._warm_dual = f.ravel(), rep.multipliers
            status, iters = rep.status.value, rep.iterations
        except QpInfeasible as exc:
            log.warning("force QP failed (%s); using clipped desired forces", exc)
            f = clip_to_pyramid(f_des, model.mu, model.f_max_z)
            self._warm = self._warm_dual = None
            status, iters = Status.INFEASIBLE.value, 0
        return TickOutput(f, self.mode.mode, acc_cmd, Ldot_cmd, status, iters)


def plan_phase_knots(plan: Trajectory, name):
    """Boolean mask of knots whose phase is ``name``."""
    if name not in plan.phase_names:
        return np.zeros(plan.n_knots, dtype=bool)
    return plan.knot_phase == plan.phase_names.index(name)
