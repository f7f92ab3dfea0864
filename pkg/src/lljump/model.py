"""Lump-leg single rigid body model (LL-SRBM).

The robot is a rigid base plus one point mass per leg. Each leg lump sits on
the segment from its contact point to the system CoM, at a fixed fraction
``rho`` of that segment, so the centroidal inertia changes with the feet.
Setting every leg mass to zero gives the plain single rigid body model.

Quaternions are stored scalar-last, ``[x, y, z, w]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateMass, NonUnitQuaternion, SingularInertia

GRAVITY = np.array([0.0, 0.0, -9.81])
UNIT_TOL = 1e-6
MAX_INERTIA_COND = 1e12


# ---------------------------------------------------------------- quaternions


def quat_identity():
    return np.array([0.0, 0.0, 0.0, 1.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def _check_unit(q, tol=UNIT_TOL):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > tol:
        raise NonUnitQuaternion(f"quaternion norm {n:.3e} deviates from 1 by more than {tol:g}")
    return q


def quat_mul(a, b):
    """Hamilton product a o b, scalar-last."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_conj(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    s = np.sin(0.5 * angle)
    return np.array([axis[0] * s, axis[1] * s, axis[2] * s, np.cos(0.5 * angle)])


def quat_from_yaw(yaw):
    return quat_from_axis_angle([0.0, 0.0, 1.0], yaw)


def quat_to_rot(q):
    """Rotation matrix (body to world) of a unit quaternion."""
    q = _check_unit(q)
    return kernels.quat_to_rot(q)


def quat_rate(q, omega):
    """Quaternion derivative ``0.5 * q o [omega, 0]``.

    ``omega`` is the body-frame angular velocity; this is the right
    quaternion product, which matches the 4x4 matrix form
    ``0.5 * [[qw,-qz,qy,qx],[qz,qw,-qx,qy],[-qy,qx,qw,qz],[-qx,-qy,-qz,qw]] @ [omega, 0]``.
    """
    q = _check_unit(q)
    return kernels.quat_rate(q, np.asarray(omega, dtype=float))


def quat_rate_matrix(q):
    """4x3 matrix Q(q) with quat_rate(q, w) == Q(q) @ w."""
    qx, qy, qz, qw = q
    return 0.5 * np.array(
        [
            [qw, -qz, qy],
            [qz, qw, -qx],
            [-qy, qx, qw],
            [-qx, -qy, -qz],
        ]
    )


def rot_to_quat(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_normalize(q)


def rot_to_axis_angle(R):
    """Rotation vector (axis * angle, angle in [0, pi]) of a rotation matrix."""
    q = rot_to_quat(R)
    if q[3] < 0:
        q = -q
    v = q[:3]
    s = np.linalg.norm(v)
    if s < 1e-12:
        # small-angle limit: axis*angle ~ 2*v
        return 2.0 * v
    angle = 2.0 * np.arctan2(s, q[3])
    return v / s * angle


def yaw_of(q):
    """Heading angle of the body x axis projected on the ground plane."""
    R = kernels.quat_to_rot(np.asarray(q, dtype=float))
    return float(np.arctan2(R[1, 0], R[0, 0]))


def slerp(q0, q1, s):
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    d = float(np.dot(q0, q1))
    if d < 0.0:
        q1, d = -q1, -d
    if d > 0.9995:
        return quat_normalize(q0 + s * (q1 - q0))
    th = np.arccos(d)
    return (np.sin((1 - s) * th) * q0 + np.sin(s * th) * q1) / np.sin(th)


# ---------------------------------------------------------------- data types


@dataclass(frozen=True, eq=False)
class LegLump:
    """Point mass standing in for one leg.

    ``mass_fraction`` (rho) is where the lump sits on the foot-to-CoM
    segment: 0 puts it at the contact point, 1 at the system CoM.
    """

    mass: float
    attach_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mass_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "attach_offset", np.asarray(self.attach_offset, dtype=float).reshape(3))
        if self.mass < 0:
            raise ValueError("leg mass must be >= 0")
        if not 0.0 <= self.mass_fraction <= 1.0:
            raise ValueError("mass_fraction must lie in [0, 1]")


def calibrate_mass_fraction(leg_com_distance, leg_length):
    """rho from the default configuration: distance foot->leg CoM over leg length."""
    if leg_length <= 0:
        raise ValueError("leg_length must be positive")
    return float(np.clip(leg_com_distance / leg_length, 0.0, 1.0))


@dataclass(eq=False)
class RobotModel:
    body_mass: float
    body_inertia: np.ndarray
    legs: list
    foot_type: str = "point"
    corner_offsets: Optional[np.ndarray] = None
    l_min: float = 0.3
    l_max: float = 0.6
    mu: float = 0.7
    f_max_z: float = 1000.0
    tau_max: Optional[np.ndarray] = None
    default_jacobian: Optional[np.ndarray] = None
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    name: str = "robot"

    def __post_init__(self):
        self.body_inertia = np.asarray(self.body_inertia, dtype=float).reshape(3, 3)
        self.gravity = np.asarray(self.gravity, dtype=float).reshape(3)
        self.legs = [leg if isinstance(leg, LegLump) else LegLump(**leg) for leg in self.legs]
        if not np.allclose(self.body_inertia, self.body_inertia.T, atol=1e-12):
            raise ValueError("body inertia must be symmetric")
        if np.min(np.linalg.eigvalsh(self.body_inertia)) <= 0:
            raise ValueError("body inertia must be positive definite")
        if self.foot_type not in ("point", "planar"):
            raise ValueError(f"foot_type must be 'point' or 'planar', got {self.foot_type!r}")
        if self.foot_type == "planar":
            if self.corner_offsets is None:
                raise ValueError("planar feet need corner_offsets")
            self.corner_offsets = np.asarray(self.corner_offsets, dtype=float).reshape(4, 3)
        else:
            self.corner_offsets = None
        if not 0 < self.l_min < self.l_max:
            raise ValueError("need 0 < l_min < l_max")
        if self.mu <= 0 or self.f_max_z <= 0:
            raise ValueError("mu and f_max_z must be positive")
        if self.total_mass <= 0:
            raise ValueError("total mass must be positive")
        self._params = None

    @property
    def n_legs(self):
        return len(self.legs)

    @property
    def total_mass(self):
        return float(self.body_mass + sum(leg.mass for leg in self.legs))

    @property
    def contacts_per_foot(self):
        return 4 if self.foot_type == "planar" else 1

    @property
    def n_contacts(self):
        return self.n_legs * self.contacts_per_foot

    @property
    def leg_masses(self):
        return np.array([leg.mass for leg in self.legs], dtype=float)

    @property
    def mass_fractions(self):
        return np.array([leg.mass_fraction for leg in self.legs], dtype=float)

    @property
    def params(self):
        if self._params is None:
            corners = self.corner_offsets if self.corner_offsets is not None else np.zeros((0, 3))
            self._params = kernels.KernelParams(
                float(self.body_mass),
                self.body_inertia.copy(),
                self.leg_masses,
                self.mass_fractions,
                np.asarray(corners, dtype=float),
                self.gravity.copy(),
            )
        return self._params

    def with_leg_masses(self, masses):
        legs = [replace(leg, mass=float(m)) for leg, m in zip(self.legs, masses)]
        return replace(self, legs=legs)

    def to_srbm(self, default_feet_body=None):
        """Single rigid body twin: leg masses zeroed.

        With ``default_feet_body`` (foot positions relative to the CoM in the
        body frame at the default configuration) the leg mass is merged into
        the base and the base inertia is replaced by the centroidal inertia of
        that default configuration, so both models share mass and nominal
        inertia. Without it the leg masses are simply dropped.
        """
        if default_feet_body is None:
            return self.with_leg_masses(np.zeros(self.n_legs))
        feet = np.asarray(default_feet_body, dtype=float).reshape(self.n_legs, 3)
        I = centroidal_inertia(quat_identity(), np.zeros(3), feet, self)
        legs = [replace(leg, mass=0.0) for leg in self.legs]
        return replace(self, body_mass=self.total_mass, body_inertia=I, legs=legs, name=self.name + "-srbm")

    def is_srbm(self):
        return not np.any(self.leg_masses)


@dataclass(eq=False)
class State:
    """CoM position, body quaternion, linear and angular momentum (world frame)."""

    r: np.ndarray
    q: np.ndarray
    H: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float).reshape(3)
        self.q = np.asarray(self.q, dtype=float).reshape(4)
        self.H = np.asarray(self.H, dtype=float).reshape(3)
        self.L = np.asarray(self.L, dtype=float).reshape(3)

    def as_vector(self):
        return np.concatenate([self.r, self.q, self.H, self.L])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[0:3], v[3:7], v[7:10], v[10:13])

    def copy(self):
        return State(self.r.copy(), self.q.copy(), self.H.copy(), self.L.copy())

    def velocity(self, model):
        return self.H / model.total_mass


@dataclass(eq=False)
class Control:
    """Contact forces (one per contact point) and foot positions, world frame."""

    forces: np.ndarray
    foot_positions: np.ndarray

    def __post_init__(self):
        self.forces = np.asarray(self.forces, dtype=float).reshape(-1, 3)
        self.foot_positions = np.asarray(self.foot_positions, dtype=float).reshape(-1, 3)

    def check(self, model):
        if self.forces.shape[0] != model.n_contacts:
            raise ValueError(f"expected {model.n_contacts} forces for {model.foot_type} feet, got {self.forces.shape[0]}")
        if self.foot_positions.shape[0] != model.n_legs:
            raise ValueError(f"expected {model.n_legs} foot positions, got {self.foot_positions.shape[0]}")
        return self

    @classmethod
    def zeros(cls, model, foot_positions):
        return cls(np.zeros((model.n_contacts, 3)), foot_positions)


# ---------------------------------------------------------------- operations


def leg_lump_position(p, r, leg):
    p = np.asarray(p, dtype=float)
    r = np.asarray(r, dtype=float)
    return p + leg.mass_fraction * (r - p)


def _com_denominator(model):
    den = model.total_mass - float(np.dot(model.leg_masses, model.mass_fractions))
    if den <= 0:
        raise DegenerateMass("total mass minus rho-weighted leg mass must be positive")
    return den


def system_com(r_body, foot_positions, model):
    """System CoM given the base CoM and the feet (closed-form fixed point)."""
    feet = np.asarray(foot_positions, dtype=float).reshape(model.n_legs, 3)
    den = _com_denominator(model)
    w = model.leg_masses * (1.0 - model.mass_fractions)
    return (np.asarray(r_body, dtype=float) * model.body_mass + w @ feet) / den


def body_position_from_com(r, foot_positions, model):
    feet = np.asarray(foot_positions, dtype=float).reshape(model.n_legs, 3)
    den = _com_denominator(model)
    if model.body_mass <= 0:
        raise DegenerateMass("body mass must be positive to recover the base position")
    w = model.leg_masses * (1.0 - model.mass_fractions)
    return (np.asarray(r, dtype=float) * den - w @ feet) / model.body_mass


def centroidal_inertia_body(q, r, foot_positions, model):
    """Centroidal inertia about the system CoM, expressed in the body frame."""
    R = quat_to_rot(q)
    feet = np.asarray(foot_positions, dtype=float).reshape(model.n_legs, 3)
    return kernels.inertia_body_frame(R, np.asarray(r, dtype=float), feet, model.params)


def centroidal_inertia(q, r, foot_positions, model):
    """World-frame centroidal inertia ``R I_G R^T``."""
    R = quat_to_rot(q)
    feet = np.asarray(foot_positions, dtype=float).reshape(model.n_legs, 3)
    IG = kernels.inertia_body_frame(R, np.asarray(r, dtype=float), feet, model.params)
    IW = R @ IG @ R.T
    return 0.5 * (IW + IW.T)


def angular_velocity(state, foot_positions, model):
    """World-frame angular velocity I_W^{-1} L."""
    IW = centroidal_inertia(state.q, state.r, foot_positions, model)
    _check_conditioning(IW)
    return np.linalg.solve(IW, state.L)


def _check_conditioning(I):
    if np.linalg.cond(I) > MAX_INERTIA_COND:
        raise SingularInertia("centroidal inertia is numerically singular")


def contact_points(q, foot_positions, model):
    R = kernels.quat_to_rot(np.asarray(q, dtype=float))
    return kernels.contact_points(R, np.asarray(foot_positions, dtype=float).reshape(model.n_legs, 3), model.params)


def dynamics(x, u, model):
    """Time derivative of the state as a 13-vector ``[r', q', H', L']``."""
    xv = x.as_vector() if isinstance(x, State) else np.asarray(x, dtype=float)
    _check_unit(xv[3:7])
    u.check(model)
    IG = centroidal_inertia_body(xv[3:7], xv[0:3], u.foot_positions, model)
    _check_conditioning(IG)
    return kernels.dynamics_batch(xv[None], u.forces[None], u.foot_positions[None], model.params)[0]


def integrate_step(x, u, dt, model):
    """Classical RK4 step with the control held constant, then renormalise q."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    xv = x.as_vector() if isinstance(x, State) else np.asarray(x, dtype=float)
    _check_unit(xv[3:7])
    u.check(model)
    IG = centroidal_inertia_body(xv[3:7], xv[0:3], u.foot_positions, model)
    _check_conditioning(IG)
    xn = kernels.rk4_batch(xv[None], u.forces[None], u.foot_positions[None], dt, model.params)[0]
    return State.from_vector(xn) if isinstance(x, State) else xn


def kinetic_energy(state, foot_positions, model):
    w = angular_velocity(state, foot_positions, model)
    return 0.5 * float(state.H @ state.H) / model.total_mass + 0.5 * float(state.L @ w)


def potential_energy(state, model):
    return -model.total_mass * float(model.gravity @ state.r)


def feet_from_body_offsets(state, offsets_body):
    """World foot positions from body-frame offsets relative to the CoM."""
    R = kernels.quat_to_rot(state.q)
    return state.r + np.asarray(offsets_body, dtype=float) @ R.T


def stack_feet(feet: Sequence) -> np.ndarray:
    return np.asarray(feet, dtype=float).reshape(-1, 3)
