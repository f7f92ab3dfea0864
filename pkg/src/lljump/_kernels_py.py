"""Vectorised numpy implementation of the hot LL-SRBM kernels.

Every function works on a leading batch axis ``B``. This module is the
fallback used when the compiled ``_kernels_cy`` extension is not built; the
two implementations share the :class:`KernelParams` layout.

State vector layout (13): ``[r(3), q(4, xyzw), H(3), L(3)]``.
"""
from typing import NamedTuple

import numpy as np


class KernelParams(NamedTuple):
    body_mass: float
    body_inertia: np.ndarray  # (3, 3), body frame
    leg_mass: np.ndarray  # (nl,)
    leg_rho: np.ndarray  # (nl,)
    corners: np.ndarray  # (nk, 3) body-frame corner offsets; nk == 0 for point feet
    gravity: np.ndarray  # (3,)

    @property
    def total_mass(self):
        return float(self.body_mass + self.leg_mass.sum())

    @property
    def n_legs(self):
        return len(self.leg_mass)

    @property
    def n_contacts(self):
        nk = len(self.corners)
        return self.n_legs * (nk if nk else 1)


def quat_to_rot(q):
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * x * y - 2 * w * z
    R[..., 0, 2] = 2 * w * y + 2 * x * z
    R[..., 1, 0] = 2 * x * y + 2 * w * z
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * y * z - 2 * w * x
    R[..., 2, 0] = 2 * x * z - 2 * w * y
    R[..., 2, 1] = 2 * w * x + 2 * y * z
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rate(q, w_body):
    """0.5 * q o [w, 0] with w expressed in the body frame."""
    qx, qy, qz, qw = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    wx, wy, wz = w_body[..., 0], w_body[..., 1], w_body[..., 2]
    out = np.empty(q.shape)
    out[..., 0] = 0.5 * (qw * wx - qz * wy + qy * wz)
    out[..., 1] = 0.5 * (qz * wx + qw * wy - qx * wz)
    out[..., 2] = 0.5 * (-qy * wx + qx * wy + qw * wz)
    out[..., 3] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    return out


def inertia_body_frame(R, r, p, params):
    """Centroidal inertia expressed in the body frame, shape (B, 3, 3)."""
    I = np.broadcast_to(params.body_inertia, R.shape[:-2] + (3, 3)).copy()
    if params.n_legs == 0:
        return I
    scale = params.leg_mass * (1.0 - params.leg_rho) ** 2  # (nl,)
    if not np.any(scale):
        return I
    d_world = r[..., None, :] - p  # (B, nl, 3)
    d = np.einsum("...ji,...lj->...li", R, d_world)  # R^T d
    sq = np.einsum("...li,...li->...l", d, d)
    I += np.einsum("l,...l->...", scale, sq)[..., None, None] * np.eye(3)
    I -= np.einsum("l,...li,...lj->...ij", scale, d, d)
    return I


def contact_points(R, p, params):
    if len(params.corners) == 0:
        return p
    offs = np.einsum("...ij,kj->...ki", R, params.corners)  # (B, nk, 3)
    pts = p[..., :, None, :] + offs[..., None, :, :]
    return pts.reshape(p.shape[:-2] + (-1, 3))


def dynamics(x, f, p, params):
    r = x[..., 0:3]
    q = x[..., 3:7]
    H = x[..., 7:10]
    L = x[..., 10:13]
    R = quat_to_rot(q)
    IG = inertia_body_frame(R, r, p, params)
    L_body = np.einsum("...ji,...j->...i", R, L)
    w_body = np.linalg.solve(IG, L_body[..., None])[..., 0]
    pts = contact_points(R, p, params)
    out = np.empty(x.shape)
    out[..., 0:3] = H / params.total_mass
    out[..., 3:7] = quat_rate(q, w_body)
    out[..., 7:10] = f.sum(axis=-2) + params.total_mass * params.gravity
    out[..., 10:13] = np.cross(pts - r[..., None, :], f).sum(axis=-2)
    return out


def rk4(x, f, p, dt, params):
    dt = np.asarray(dt, dtype=float)[..., None]
    k1 = dynamics(x, f, p, params)
    k2 = dynamics(x + 0.5 * dt * k1, f, p, params)
    k3 = dynamics(x + 0.5 * dt * k2, f, p, params)
    k4 = dynamics(x + dt * k3, f, p, params)
    xn = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    xn[..., 3:7] /= np.linalg.norm(xn[..., 3:7], axis=-1, keepdims=True)
    return xn
