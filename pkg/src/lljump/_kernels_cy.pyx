# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LL-SRBM dynamics and RK4 kernels (batched).

Mirrors lljump._kernels_py.dynamics / rk4; arguments are the unpacked
KernelParams fields so the module has no Python-level dependencies.
"""
import numpy as np
from libc.math cimport sqrt


cdef inline void _rot(const double* q, double* R) noexcept nogil:
    cdef double x = q[0], y = q[1], z = q[2], w = q[3]
    R[0] = 1 - 2 * (y * y + z * z)
    R[1] = 2 * x * y - 2 * w * z
    R[2] = 2 * w * y + 2 * x * z
    R[3] = 2 * x * y + 2 * w * z
    R[4] = 1 - 2 * (x * x + z * z)
    R[5] = 2 * y * z - 2 * w * x
    R[6] = 2 * x * z - 2 * w * y
    R[7] = 2 * w * x + 2 * y * z
    R[8] = 1 - 2 * (x * x + y * y)


cdef inline void _solve3(const double* A, const double* b, double* out) noexcept nogil:
    # Cramer's rule; A is symmetric positive definite here
    cdef double c00 = A[4] * A[8] - A[5] * A[7]
    cdef double c01 = A[5] * A[6] - A[3] * A[8]
    cdef double c02 = A[3] * A[7] - A[4] * A[6]
    cdef double det = A[0] * c00 + A[1] * c01 + A[2] * c02
    cdef double inv = 1.0 / det
    cdef double i00 = c00 * inv
    cdef double i01 = (A[2] * A[7] - A[1] * A[8]) * inv
    cdef double i02 = (A[1] * A[5] - A[2] * A[4]) * inv
    cdef double i10 = c01 * inv
    cdef double i11 = (A[0] * A[8] - A[2] * A[6]) * inv
    cdef double i12 = (A[2] * A[3] - A[0] * A[5]) * inv
    cdef double i20 = c02 * inv
    cdef double i21 = (A[1] * A[6] - A[0] * A[7]) * inv
    cdef double i22 = (A[0] * A[4] - A[1] * A[3]) * inv
    out[0] = i00 * b[0] + i01 * b[1] + i02 * b[2]
    out[1] = i10 * b[0] + i11 * b[1] + i12 * b[2]
    out[2] = i20 * b[0] + i21 * b[1] + i22 * b[2]


cdef void _deriv(const double* x, const double* f, const double* p,
                 int nl, int nk, double mb, const double* IB,
                 const double* lm, const double* rho, const double* corners,
                 const double* g, double mtot, double* out) noexcept nogil:
    cdef double R[9]
    cdef double IG[9]
    cdef double d[3]
    cdef double dw[3]
    cdef double Lb[3]
    cdef double wb[3]
    cdef double pt[3]
    cdef double s, sq, a0, a1, a2
    cdef int i, j, k, c, nc
    cdef double qx = x[3], qy = x[4], qz = x[5], qw = x[6]
    _rot(x + 3, R)
    for i in range(9):
        IG[i] = IB[i]
    for i in range(nl):
        s = lm[i] * (1.0 - rho[i]) * (1.0 - rho[i])
        if s == 0.0:
            continue
        dw[0] = x[0] - p[3 * i]
        dw[1] = x[1] - p[3 * i + 1]
        dw[2] = x[2] - p[3 * i + 2]
        for j in range(3):
            d[j] = R[j] * dw[0] + R[3 + j] * dw[1] + R[6 + j] * dw[2]
        sq = d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
        for j in range(3):
            for k in range(3):
                IG[3 * j + k] -= s * d[j] * d[k]
            IG[4 * j] += s * sq
    for j in range(3):
        Lb[j] = R[j] * x[10] + R[3 + j] * x[11] + R[6 + j] * x[12]
    _solve3(IG, Lb, wb)
    out[0] = x[7] / mtot
    out[1] = x[8] / mtot
    out[2] = x[9] / mtot
    out[3] = 0.5 * (qw * wb[0] - qz * wb[1] + qy * wb[2])
    out[4] = 0.5 * (qz * wb[0] + qw * wb[1] - qx * wb[2])
    out[5] = 0.5 * (-qy * wb[0] + qx * wb[1] + qw * wb[2])
    out[6] = 0.5 * (-qx * wb[0] - qy * wb[1] - qz * wb[2])
    out[7] = mtot * g[0]
    out[8] = mtot * g[1]
    out[9] = mtot * g[2]
    out[10] = 0.0
    out[11] = 0.0
    out[12] = 0.0
    nc = nl * (nk if nk > 0 else 1)
    for c in range(nc):
        if nk > 0:
            i = c // nk
            k = c % nk
            for j in range(3):
                pt[j] = p[3 * i + j] + R[3 * j] * corners[3 * k] + R[3 * j + 1] * corners[3 * k + 1] + R[3 * j + 2] * corners[3 * k + 2]
        else:
            pt[0] = p[3 * c]
            pt[1] = p[3 * c + 1]
            pt[2] = p[3 * c + 2]
        a0 = pt[0] - x[0]
        a1 = pt[1] - x[1]
        a2 = pt[2] - x[2]
        out[7] += f[3 * c]
        out[8] += f[3 * c + 1]
        out[9] += f[3 * c + 2]
        out[10] += a1 * f[3 * c + 2] - a2 * f[3 * c + 1]
        out[11] += a2 * f[3 * c] - a0 * f[3 * c + 2]
        out[12] += a0 * f[3 * c + 1] - a1 * f[3 * c]


def dynamics_batch(const double[:, ::1] x, const double[:, :, ::1] f, const double[:, :, ::1] p,
                   double mb, const double[:, ::1] IB, const double[::1] lm, const double[::1] rho,
                   const double[:, ::1] corners, const double[::1] g):
    cdef Py_ssize_t B = x.shape[0], b
    cdef int nl = p.shape[1]
    cdef int nk = corners.shape[0]
    cdef double mtot = mb
    cdef int i
    for i in range(nl):
        mtot += lm[i]
    out_arr = np.empty((B, 13))
    cdef double[:, ::1] out = out_arr
    cdef const double* cptr = &corners[0, 0] if nk > 0 else NULL
    cdef const double* lmp = &lm[0] if nl > 0 else NULL
    cdef const double* rhop = &rho[0] if nl > 0 else NULL
    with nogil:
        for b in range(B):
            _deriv(&x[b, 0], &f[b, 0, 0], &p[b, 0, 0], nl, nk, mb, &IB[0, 0],
                   lmp, rhop, cptr, &g[0], mtot, &out[b, 0])
    return out_arr


def rk4_batch(const double[:, ::1] x, const double[:, :, ::1] f, const double[:, :, ::1] p, const double[::1] dt,
              double mb, const double[:, ::1] IB, const double[::1] lm, const double[::1] rho,
              const double[:, ::1] corners, const double[::1] g):
    cdef Py_ssize_t B = x.shape[0], b
    cdef int nl = p.shape[1]
    cdef int nk = corners.shape[0]
    cdef double mtot = mb
    cdef int i
    for i in range(nl):
        mtot += lm[i]
    out_arr = np.empty((B, 13))
    cdef double[:, ::1] out = out_arr
    cdef double k1[13]
    cdef double k2[13]
    cdef double k3[13]
    cdef double k4[13]
    cdef double xt[13]
    cdef double h, nq
    cdef const double* cptr = &corners[0, 0] if nk > 0 else NULL
    cdef const double* lmp = &lm[0] if nl > 0 else NULL
    cdef const double* rhop = &rho[0] if nl > 0 else NULL
    with nogil:
        for b in range(B):
            h = dt[b]
            _deriv(&x[b, 0], &f[b, 0, 0], &p[b, 0, 0], nl, nk, mb, &IB[0, 0], lmp, rhop, cptr, &g[0], mtot, k1)
            for i in range(13):
                xt[i] = x[b, i] + 0.5 * h * k1[i]
            _deriv(xt, &f[b, 0, 0], &p[b, 0, 0], nl, nk, mb, &IB[0, 0], lmp, rhop, cptr, &g[0], mtot, k2)
            for i in range(13):
                xt[i] = x[b, i] + 0.5 * h * k2[i]
            _deriv(xt, &f[b, 0, 0], &p[b, 0, 0], nl, nk, mb, &IB[0, 0], lmp, rhop, cptr, &g[0], mtot, k3)
            for i in range(13):
                xt[i] = x[b, i] + h * k3[i]
            _deriv(xt, &f[b, 0, 0], &p[b, 0, 0], nl, nk, mb, &IB[0, 0], lmp, rhop, cptr, &g[0], mtot, k4)
            for i in range(13):
                out[b, i] = x[b, i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            nq = sqrt(out[b, 3] * out[b, 3] + out[b, 4] * out[b, 4] + out[b, 5] * out[b, 5] + out[b, 6] * out[b, 6])
            for i in range(3, 7):
                out[b, i] /= nq
    return out_arr
