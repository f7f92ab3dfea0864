"""Closed-loop simulation of a jump plan on the lump-leg model.

Physics: RK4 substeps (at most 1 ms) of the centroidal dynamics. Before a
touchdown is detected, ground contact is a compliant penalty model acting on
the foot contact points; during the planned takeoff stance and after
touchdown the controller forces are applied at the (fixed) feet.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import io as lio
from .controller import CentroidalController
from .detection import ContactDetector, DetectorConfig, average_spatial_velocity
from .errors import NumericalBlowup
from .model import (
    Control, RobotModel, State, centroidal_inertia, contact_points, integrate_step, quat_identity, quat_to_rot,
    rot_to_axis_angle, yaw_of,
)
from .transcription import Trajectory

log = logging.getLogger(__name__)

MAX_SUBSTEP = 1e-3


@dataclass
class GroundModel:
    """Flat ground at ``height`` with optional raised/lowered boxes.

    ``regions`` holds ``(x_min, x_max, y_min, y_max, offset)`` rows; the
    offset is added to ``height`` inside the box.
    """

    height: float = 0.0
    k_n: float = 5e4
    d_n: float = 5e2
    mu: float = 0.8
    regions: list = field(default_factory=list)

    def __post_init__(self):
        if not (self.k_n > 0 and self.d_n > 0):
            raise ValueError("k_n and d_n must be positive")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        self.regions = [tuple(float(v) for v in r) for r in self.regions]

    def height_at(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        h = np.full(x.shape, float(self.height))
        for x0, x1, y0, y1, off in self.regions:
            inside = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
            h = np.where(inside, self.height + off, h)
        return h

    @classmethod
    def with_platform(cls, offset, half_size=5.0, **kw):
        """Platform of height ``offset`` covering the landing area."""
        return cls(regions=[(-half_size, half_size, -half_size, half_size, offset)], **kw)


@dataclass
class SimConfig:
    rate: Optional[float] = None  # control rate (Hz); robot default when None
    substeps: Optional[int] = None  # per control tick; enough for <= 1 ms when None
    noise_v: float = 0.0  # std of the observed CoM velocity noise (m/s)
    seed: int = 0
    duration: Optional[float] = None  # plan duration + settle_time when None
    settle_time: float = 1.0
    state_bound: float = 1e6

    def __post_init__(self):
        if self.rate is not None and self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.substeps is not None and self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.noise_v < 0:
            raise ValueError("noise_v must be >= 0")


# ------------------------------------------------------------ physics


def point_velocities(x: State, feet, points, model: RobotModel):
    IW = centroidal_inertia(x.q, x.r, feet, model)
    w = np.linalg.solve(IW, x.L)
    return x.H / model.total_mass + np.cross(w, points - x.r)


def penalty_forces(points, velocities, ground: GroundModel):
    """Spring-damper normal force (never pulling) and Coulomb-clipped viscous friction."""
    zg = ground.height_at(points[:, 0], points[:, 1])
    pen = zg - points[:, 2]
    f = np.zeros_like(points)
    on = pen > 0
    if not on.any():
        return f, pen
    vz = velocities[on, 2]
    fn = np.maximum(ground.k_n * pen[on] + ground.d_n * np.maximum(0.0, -vz), 0.0)
    ft = -ground.d_n * velocities[on, :2]
    mag = np.linalg.norm(ft, axis=1)
    cap = ground.mu * fn
    scale = np.where(mag > cap, cap / np.maximum(mag, 1e-300), 1.0)
    f[on, :2] = ft * scale[:, None]
    f[on, 2] = fn
    return f, pen


def step_physics(x: State, forces, feet, model: RobotModel, ground: Optional[GroundModel], dt_sub):
    """One physics substep; returns ``(x', applied contact forces, penetration per contact)``.

    ``forces=None`` means no commanded forces (flight): the ground model
    supplies whatever contact forces arise from penetration.
    """
    if dt_sub > MAX_SUBSTEP + 1e-15:
        raise ValueError(f"physics substep {dt_sub} exceeds {MAX_SUBSTEP} s")
    pts = contact_points(x.q, feet, model)
    if forces is None:
        if ground is None:
            f, pen = np.zeros_like(pts), np.full(len(pts), -np.inf)
        else:
            f, pen = penalty_forces(pts, point_velocities(x, feet, pts, model), ground)
    else:
        f = np.asarray(forces, dtype=float).reshape(pts.shape)
        pen = (ground.height_at(pts[:, 0], pts[:, 1]) - pts[:, 2]) if ground is not None else np.full(len(pts), -np.inf)
    return integrate_step(x, Control(f, feet), dt_sub, model), f, pen


# ------------------------------------------------------------ run log


def runlog_columns(n_legs, n_contacts):
    cols = ["tick", "t", "mode", "phase", "rx", "ry", "rz", "qx", "qy", "qz", "qw", "Hx", "Hy", "Hz", "Lx", "Ly", "Lz",
            "vG_norm", "vG_norm_true", "penetration", "qp_status"]
    cols += [f"p{i}{a}" for i in range(n_legs) for a in "xyz"]
    cols += [f"f{j}{a}" for j in range(n_contacts) for a in "xyz"]
    return cols


@dataclass(eq=False)
class RunLog:
    """Per-tick record of a closed-loop run (uniform control ticks)."""

    t: np.ndarray
    X: np.ndarray
    feet: np.ndarray
    forces: np.ndarray
    mode: list
    phase: list
    vg_norm: np.ndarray
    vg_norm_true: np.ndarray
    penetration: np.ndarray
    qp_status: list
    events: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def n_ticks(self):
        return len(self.t)

    @property
    def v_com(self):
        return self.X[:, 7:10] / self.meta.get("total_mass", 1.0)

    def event_time(self, name):
        for e in self.events:
            if e["event"] == name:
                return e["t"]
        return None

    def equals(self, other):
        """Bitwise comparison of every logged quantity."""
        arrays = ("t", "X", "feet", "forces", "vg_norm", "vg_norm_true", "penetration")
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and self.mode == other.mode and self.phase == other.phase and self.qp_status == other.qp_status
                and self.events == other.events)

    def save(self, path):
        nl, nc = self.feet.shape[1], self.forces.shape[1]
        rows = []
        for i in range(self.n_ticks):
            rows.append([i, float(self.t[i]), self.mode[i], self.phase[i], *map(float, self.X[i]), float(self.vg_norm[i]),
                         float(self.vg_norm_true[i]), float(self.penetration[i]), self.qp_status[i],
                         *map(float, self.feet[i].ravel()), *map(float, self.forces[i].ravel())])
        side = {"format_version": lio.FORMAT_VERSION, "kind": "runlog", "n_legs": nl, "n_contacts": nc,
                "columns": runlog_columns(nl, nc), "events": self.events, "meta": self.meta}
        lio.atomic_write_text(lio.sidecar_path(path), _json_dump(side))
        lio.atomic_write_text(path, lio.table_to_csv(runlog_columns(nl, nc), rows))

    @classmethod
    def load(cls, path):
        side = lio.read_sidecar(path)
        if side.get("kind") != "runlog":
            raise lio.FileFormatError(f"{path}: not a run log")
        nl, nc = int(side["n_legs"]), int(side["n_contacts"])
        header, rows = lio.read_csv(path)
        if header != runlog_columns(nl, nc):
            raise lio.FileFormatError(f"{path}: unexpected columns")
        if not rows:
            raise lio.FileFormatError(f"{path}: no ticks")
        try:
            num = lambda r, a, b: [float(v) for v in r[a:b]]
            t = np.array([float(r[1]) for r in rows])
            X = np.array([num(r, 4, 17) for r in rows])
            vg = np.array([float(r[17]) for r in rows])
            vgt = np.array([float(r[18]) for r in rows])
            pen = np.array([float(r[19]) for r in rows])
            feet = np.array([num(r, 21, 21 + 3 * nl) for r in rows]).reshape(-1, nl, 3)
            forces = np.array([num(r, 21 + 3 * nl, 21 + 3 * nl + 3 * nc) for r in rows]).reshape(-1, nc, 3)
        except (ValueError, IndexError) as exc:
            raise lio.FileFormatError(f"{path}: {exc}") from exc
        return cls(t, X, feet, forces, [r[2] for r in rows], [r[3] for r in rows], vg, vgt, pen,
                   [r[20] for r in rows], side.get("events", []), side.get("meta", {}))


def _json_dump(obj):
    import json

    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(type(o))

    return json.dumps(obj, indent=2, sort_keys=True, default=default)


# ------------------------------------------------------------ closed loop


def phase_times(plan: Trajectory):
    """(takeoff time, planned touchdown time); equal when the plan has no flight."""
    t = plan.t
    names = plan.phase_names
    kp = plan.knot_phase[:-1]
    take = np.flatnonzero(kp == names.index("takeoff")) if "takeoff" in names else np.array([], dtype=int)
    fl = np.flatnonzero(kp == names.index("flight")) if "flight" in names else np.array([], dtype=int)
    t_off = float(t[take[-1] + 1]) if len(take) else 0.0
    t_land = float(t[fl[-1] + 1]) if len(fl) else t_off
    return t_off, t_land


def _feet_following_plan(x: State, plan: Trajectory, t_plan, model):
    """Feet keep the plan's body-frame offsets (swing legs are position controlled)."""
    ref, _, feet_plan, _ = plan.sample(min(max(t_plan, 0.0), plan.duration))
    R, R_ref = quat_to_rot(x.q), quat_to_rot(ref.q)
    return x.r + (feet_plan - ref.r) @ R_ref @ R.T


def run_closed_loop(plan: Trajectory, model: RobotModel, controller: Optional[dict] = None,
                    detector: Optional[DetectorConfig] = None, sim: Optional[SimConfig] = None,
                    ground: Optional[GroundModel] = None, x0=None) -> RunLog:
    """Simulate ``plan`` under the tracking controller; see the module docstring."""
    sim = sim or SimConfig()
    ground = ground or GroundModel()
    ctrl = CentroidalController(plan, model, **(controller or {}), **({"rate": sim.rate} if sim.rate else {}))
    period = ctrl.period
    n_sub = sim.substeps or max(1, math.ceil(period / MAX_SUBSTEP - 1e-9))
    dt_sub = period / n_sub
    det = ContactDetector(detector or DetectorConfig())
    rng = np.random.default_rng(sim.seed)
    t_off, t_land = phase_times(plan)
    has_flight = t_land > t_off
    duration = sim.duration if sim.duration is not None else plan.duration + sim.settle_time
    n_ticks = int(math.floor(duration / period + 1e-9)) + 1

    x = State.from_vector(plan.X[0] if x0 is None else x0)
    feet = plan.feet[0].copy()
    phase = "stance" if (t_off > 0 or not has_flight) else "flight"
    if phase == "flight":
        det.reset(0.0)
    offset = 0.0
    t_touch = None
    first_pen = None
    events = []
    nl, nc = model.n_legs, model.n_contacts
    T = np.empty(n_ticks)
    XS = np.empty((n_ticks, 13))
    FE = np.empty((n_ticks, nl, 3))
    FO = np.empty((n_ticks, nc, 3))
    VG = np.empty(n_ticks)
    VGT = np.empty(n_ticks)
    PEN = np.empty(n_ticks)
    modes, phases, qp = [], [], []

    for i in range(n_ticks):
        t = i * period
        t_plan = t + offset
        if phase == "stance" and has_flight and t_touch is None and t_plan >= t_off - 1e-12:
            phase = "flight"
            det.reset(t)
            events.append({"event": "takeoff", "t": t, "tick": i})
        if phase == "flight":
            # past the planned touchdown the legs hold their touchdown pose
            feet = _feet_following_plan(x, plan, min(t_plan, t_land), model)
        noise = rng.normal(0.0, sim.noise_v, 3) if sim.noise_v > 0 else None
        sample = average_spatial_velocity(x, feet, model, t, noise)
        true_norm = average_spatial_velocity(x, feet, model, t).norm
        contact_event = False
        if phase == "flight" and det.update(t, sample.norm) is not None:
            contact_event = True
            phase = "landed"
            t_touch = t
            offset = t_land - t
            t_plan = t + offset
            events.append({"event": "touchdown_detected", "t": t, "tick": i})
        prev_mode = ctrl.mode.mode
        mode = ctrl.update_mode(contact_event, t).mode
        if mode != prev_mode:
            events.append({"event": "mode_" + mode.value, "t": t, "tick": i})
        forces = None
        status = ""
        if phase != "flight":
            obs = x if noise is None else State(x.r, x.q, x.H + model.total_mass * noise, x.L)
            out = ctrl.tick(t_plan, obs, feet, None if t_touch is None else t - t_touch)
            forces = out.forces
            status = out.qp_status
        pts = contact_points(x.q, feet, model)
        pen0 = float(np.max(ground.height_at(pts[:, 0], pts[:, 1]) - pts[:, 2]))
        T[i], XS[i], FE[i], VG[i], VGT[i], PEN[i] = t, x.as_vector(), feet, sample.norm, true_norm, pen0
        modes.append(mode.value)
        phases.append(phase)
        qp.append(status)
        applied = np.zeros((nc, 3)) if forces is None else forces
        for j in range(n_sub):
            x, f_sub, pen = step_physics(x, forces, feet, model, ground, dt_sub)
            if forces is None:
                applied = f_sub
                if first_pen is None and np.max(pen) > 0:
                    first_pen = t + j * dt_sub
                    events.append({"event": "first_penetration", "t": first_pen, "tick": i})
            xv = x.as_vector()
            if not np.all(np.isfinite(xv)) or np.abs(xv).max() > sim.state_bound:
                raise NumericalBlowup(f"state left the sanity envelope at tick {i} (t={t:.4f} s)", tick=i)
        FO[i] = applied
    meta = {
        "total_mass": model.total_mass,
        "model": model.name,
        "rate": ctrl.rate,
        "substeps": n_sub,
        "seed": sim.seed,
        "noise_v": sim.noise_v,
        "plan_hash": lio.trajectory_hash(plan),
        "planned_takeoff": t_off,
        "planned_touchdown": t_land,
        "ground": asdict(ground),
        "detector": asdict(det.cfg),
    }
    return RunLog(T, XS, FE, FO, modes, phases, VG, VGT, PEN, qp, events, meta)


# ------------------------------------------------------------ synthetic plans


def drop_plan(model: RobotModel, stance_height=0.45, drop_height=0.3, hold_time=0.3, n_flight=10, n_land=6,
              feet_body=None):
    """Free fall from rest onto flat ground, then standing still.

    The legs hang at ``feet_body`` (body-frame offsets from the CoM; default
    hips straight down by ``stance_height``), so the feet reach z=0 at the end
    of the fall. The landing phase holds the touchdown pose at rest with the
    weight shared evenly: the impact itself is left to the ground and the
    controller, so the plan is not dynamically consistent across touchdown.
    """
    m = model.total_mass
    g = -model.gravity[2]
    if feet_body is None:
        feet_body = np.array([lg.attach_offset for lg in model.legs]) + [0.0, 0.0, -stance_height]
    feet_body = np.asarray(feet_body, dtype=float).reshape(model.n_legs, 3)
    if drop_height <= 0:
        raise ValueError("drop_height must be positive")
    t_fall = math.sqrt(2 * drop_height / g)
    ks = n_flight + n_land + 1
    X = np.zeros((ks, 13))
    X[:, 3:7] = quat_identity()
    feet = np.zeros((ks, model.n_legs, 3))
    forces = np.zeros((ks, model.n_contacts, 3))
    dts = np.concatenate([np.full(n_flight, t_fall / n_flight), np.full(n_land, hold_time / n_land)])
    z0 = stance_height + drop_height
    for k in range(ks):
        tau = min(k, n_flight) * t_fall / n_flight
        z, vz = (z0 - 0.5 * g * tau ** 2, -g * tau) if k < n_flight else (stance_height, 0.0)
        X[k, 2] = z
        X[k, 9] = m * vz
        feet[k] = np.array([0.0, 0.0, z]) + feet_body
    forces[n_flight:, :, 2] = m * g / model.n_contacts
    phase = (np.arange(ks) >= n_flight).astype(int) + 1
    contact = np.repeat((np.arange(ks) >= n_flight)[:, None], model.n_legs, axis=1)
    return Trajectory(X, forces, feet, dts, phase, contact, meta={"kind": "drop", "drop_height": drop_height})


# ------------------------------------------------------------ plan metrics


def yaw_axis_distance(traj: Trajectory, k):
    """Mean distance of the feet from the body z axis through the CoM at knot ``k``."""
    R = quat_to_rot(traj.X[k, 3:7])
    a = R[:, 2]
    d = traj.feet[k] - traj.X[k, 0:3]
    perp = d - np.outer(d @ a, a)
    return float(np.linalg.norm(perp, axis=1).mean())


def time_to_orientation(traj: Trajectory, q_target, tol_deg=2.0, samples_per_segment=20):
    """First time the body is within ``tol_deg`` of ``q_target`` (None if never)."""
    Rt = quat_to_rot(q_target)
    t = traj.t
    for k in range(traj.n_knots - 1):
        for s in np.linspace(0.0, 1.0, samples_per_segment, endpoint=False):
            tt = t[k] + s * (t[k + 1] - t[k])
            x, _, _, _ = traj.sample(tt)
            if np.degrees(np.linalg.norm(rot_to_axis_angle(Rt @ quat_to_rot(x.q).T))) <= tol_deg:
                return float(tt)
    R_end = quat_to_rot(traj.X[-1, 3:7])
    if np.degrees(np.linalg.norm(rot_to_axis_angle(Rt @ R_end.T))) <= tol_deg:
        return float(t[-1])
    return None


def plan_metrics(traj: Trajectory, model: RobotModel, q_target, travel=None):
    flight = traj.flight_knots()
    yaw = np.unwrap([yaw_of(traj.X[k, 3:7]) for k in range(traj.n_knots)])
    out = {
        "duration": traj.duration,
        "time_to_target": time_to_orientation(traj, q_target),
        "flight_knots": flight.tolist(),
        "yaw_deg": np.degrees(yaw).tolist(),
    }
    if len(flight):
        t = traj.t
        k0, k1 = flight[0], flight[-1] + 1
        out["flight_mean_yaw_rate"] = float((yaw[k1] - yaw[k0]) / max(t[k1] - t[k0], 1e-12))
        out["flight_IWzz"] = [float(centroidal_inertia(traj.X[k, 3:7], traj.X[k, :3], traj.feet[k], model)[2, 2]) for k in flight]
        dist = [yaw_axis_distance(traj, k) for k in flight]
        out["flight_foot_axis_distance"] = dist
        out["flight_mean_foot_axis_distance"] = float(np.mean(dist))
        if travel is not None and np.linalg.norm(travel[:2]) > 0:
            d = np.asarray(travel[:2], dtype=float) / np.linalg.norm(travel[:2])
            ext = [float(np.abs((traj.feet[k, :, :2] - traj.X[k, :2]) @ d).mean()) for k in flight]
            out["flight_feet_extension"] = ext
            out["flight_mean_feet_extension"] = float(np.mean(ext))
    return out


@dataclass
class ComparisonReport:
    names: list
    statuses: list
    solve_times: list
    iterations: list
    metrics: list
    simulations: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)

    @property
    def ok(self):
        return all(s == "Converged" for s in self.statuses)

    def to_dict(self):
        return {"names": self.names, "statuses": self.statuses, "solve_times": self.solve_times,
                "iterations": self.iterations, "metrics": self.metrics, "simulations": self.simulations}


def compare_models(task, schedule, weights, model_ll: RobotModel, model_srb: RobotModel, solver_cfg=None,
                   simulate=False, sim: Optional[SimConfig] = None, controller: Optional[dict] = None,
                   detector: Optional[DetectorConfig] = None):
    """Plan (and optionally simulate on the lump-leg plant) with both models."""
    from .transcription import plan_jump

    travel = task.x_fin.r - task.x_ini.r
    rep = ComparisonReport([], [], [], [], [])
    for model in (model_ll, model_srb):
        t0 = time.perf_counter()
        try:
            traj, sr = plan_jump(task, schedule, weights, model, solver_cfg)
            status, iters = sr.status.value, sr.iterations
            if not sr.converged:
                traj = None  # unconverged knots are not a motion worth measuring
        except Exception as exc:  # reported per model, not raised
            log.error("planning with %s failed: %s", model.name, exc)
            traj, status, iters = None, f"Error: {exc}", 0
        rep.names.append(model.name)
        rep.statuses.append(status)
        rep.solve_times.append(time.perf_counter() - t0)
        rep.iterations.append(iters)
        rep.trajectories.append(traj)
        rep.metrics.append(plan_metrics(traj, model, task.x_fin.q, travel) if traj is not None else {})
        if simulate and traj is not None:
            try:
                run = run_closed_loop(traj, model_ll, controller, detector, sim)
                xf = State.from_vector(run.X[-1])
                err = np.degrees(np.linalg.norm(rot_to_axis_angle(quat_to_rot(task.x_fin.q) @ quat_to_rot(xf.q).T)))
                rep.simulations.append({"touchdown": run.event_time("touchdown_detected"),
                                        "final_orientation_error_deg": float(err),
                                        "final_position_error": float(np.linalg.norm(xf.r - task.x_fin.r))})
            except NumericalBlowup as exc:
                rep.simulations.append({"error": str(exc)})
    return rep
