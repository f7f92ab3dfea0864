"""Backend selection for the batched dynamics kernels.

The compiled extension ``lljump._kernels_cy`` is used when it imports;
otherwise the numpy implementation in :mod:`lljump._kernels_py` is used.
Set ``LLJUMP_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py
from ._kernels_py import KernelParams, contact_points, inertia_body_frame, quat_rate, quat_to_rot

__all__ = [
    "BACKEND",
    "KernelParams",
    "contact_points",
    "dynamics_batch",
    "inertia_body_frame",
    "quat_rate",
    "quat_to_rot",
    "rk4_batch",
    "use_backend",
]

_cy = None
if not os.environ.get("LLJUMP_PURE_PYTHON"):
    try:
        from . import _kernels_cy as _cy
    except ImportError:  # extension not built
        _cy = None

BACKEND = "cython" if _cy is not None else "numpy"


def use_backend(name):
    """Switch backend at runtime ("cython" or "numpy"); returns the previous one."""
    global BACKEND
    if name not in ("cython", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "cython" and _cy is None:
        raise ImportError("compiled kernels are not available")
    prev, BACKEND = BACKEND, name
    return prev


def _as_batch(x, f, p, dt=None):
    x = np.ascontiguousarray(x, dtype=float)
    f = np.ascontiguousarray(f, dtype=float)
    p = np.ascontiguousarray(p, dtype=float)
    if dt is not None:
        dt = np.ascontiguousarray(np.broadcast_to(np.asarray(dt, dtype=float), x.shape[:1]))
    return x, f, p, dt


def dynamics_batch(x, f, p, params):
    """State derivatives for a batch: x (B,13), f (B,nc,3), p (B,nl,3)."""
    x, f, p, _ = _as_batch(x, f, p)
    if BACKEND == "cython":
        return _cy.dynamics_batch(x, f, p, *_cy_args(params))
    return _kernels_py.dynamics(x, f, p, params)


def rk4_batch(x, f, p, dt, params):
    """One RK4 step per batch row with controls held constant, quaternion renormalised."""
    x, f, p, dt = _as_batch(x, f, p, dt)
    if BACKEND == "cython":
        return _cy.rk4_batch(x, f, p, dt, *_cy_args(params))
    return _kernels_py.rk4(x, f, p, dt, params)


def _cy_args(params):
    return (
        float(params.body_mass),
        np.ascontiguousarray(params.body_inertia, dtype=float),
        np.ascontiguousarray(params.leg_mass, dtype=float),
        np.ascontiguousarray(params.leg_rho, dtype=float),
        np.ascontiguousarray(np.reshape(params.corners, (-1, 3)), dtype=float),
        np.ascontiguousarray(params.gravity, dtype=float),
    )
